"""Experiment workflows: training loops, evaluation protocols, reports.

Everything is driven by (global seed -> purpose tag -> trial index) generator
hierarchies, so any emitted record can be replayed exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import autograd as ag
from . import data as datagen
from . import metrics, objectives, text, video
from .autograd import Tensor
from .config import ExperimentConfig
from .data import SyntheticDataset, SyntheticSpec
from .model import ModelConfig, PromptedVideoModel, seeded_rng
from .objectives import AdamW, TrainConfig

BUILD_ID = "vidprompt-0.1.0"


# ---------------------------------------------------------------------------
# vocabulary and model assembly
# ---------------------------------------------------------------------------

def vocab_words_for(names: list[str], extra_text: list[str] = (),
                    size: int = 256) -> list[str]:
    """Closed toy vocabulary: subwords of the category names and captions,
    padded with filler subwords up to the requested size."""
    words: list[str] = []
    seen = set()
    for chunk in list(names) + list(extra_text):
        for word in chunk.lower().split():
            for part in word.split("-"):
                if part and part not in seen:
                    seen.add(part)
                    words.append(part)
    i = 0
    while len(words) + 4 < size:  # 4 specials added by Vocabulary
        filler = f"sw{i:03d}"
        if filler not in seen:
            words.append(filler)
            seen.add(filler)
        i += 1
    return words


def build_model(cfg: ExperimentConfig, names: list[str],
                extra_text: list[str] = (), prompt_k: int | None = None,
                temporal_depth: int | None = None,
                vocab_size: int = 256) -> PromptedVideoModel:
    mc = dataclasses.replace(
        cfg.model,
        prompt_k=cfg.model.prompt_k if prompt_k is None else prompt_k,
        temporal_depth=(cfg.model.temporal_depth if temporal_depth is None
                        else temporal_depth),
        frame_dim=cfg.data.frame_dim)
    extras = list(extra_text) + [datagen.pseudo_sentence(n) for n in names]
    return PromptedVideoModel(mc, vocab_words_for(names, extras, size=vocab_size),
                              seed=cfg.seed)


def build_dataset(cfg: ExperimentConfig, model: PromptedVideoModel | None = None,
                  spec: SyntheticSpec | None = None) -> SyntheticDataset:
    spec = spec if spec is not None else cfg.data
    rng = seeded_rng(cfg.seed, "dataset")
    proto_fn = model.prototype_for_name if model is not None else None
    return datagen.generate_synthetic_dataset(spec, rng, prototype_fn=proto_fn)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_recognition(model: PromptedVideoModel, videos: list[video.VideoSample],
                      names: list[str], train_cfg: TrainConfig,
                      temperature: float, seed: int,
                      steps: int | None = None) -> list[float]:
    """Contrastive training of the prompt bank (and temporal encoder) against
    per-category classifiers; frozen weights never updated."""
    steps = steps if steps is not None else train_cfg.step_count
    optimizer = AdamW(model.trainable_parameters(), train_cfg)
    batch_rng = seeded_rng(seed, "train-batch")
    clip_rng = seeded_rng(seed, "train-clips")
    labels = np.asarray([int(v.label) for v in videos])
    losses = []
    for _ in range(steps):
        idx = batch_rng.integers(0, len(videos),
                                 size=min(train_cfg.batch_size, len(videos)))

        def loss_fn():
            classifiers = model.classifiers(names)
            feats = ag.concat_rows([model.sampled_clip_feature(videos[i], clip_rng)
                                    for i in idx])
            sims = model.logits(feats, classifiers)
            return objectives.nce_loss(sims, labels[idx], temperature)

        losses.append(objectives.train_step(loss_fn, optimizer))
    return losses


def train_retrieval(model: PromptedVideoModel, videos: list[video.VideoSample],
                    train_cfg: TrainConfig, temperature: float, seed: int,
                    steps: int | None = None, symmetric: bool = False) -> list[float]:
    """In-batch contrastive training of video features against their paired
    query embeddings."""
    steps = steps if steps is not None else train_cfg.step_count
    optimizer = AdamW(model.trainable_parameters(), train_cfg)
    batch_rng = seeded_rng(seed, "train-batch")
    clip_rng = seeded_rng(seed, "train-clips")
    losses = []
    for _ in range(steps):
        idx = batch_rng.choice(len(videos),
                               size=min(train_cfg.batch_size, len(videos)),
                               replace=False)

        def loss_fn():
            queries = ag.concat_rows([model.query_embedding(videos[i].label)
                                      for i in idx])
            feats = ag.concat_rows([model.sampled_clip_feature(videos[i], clip_rng)
                                    for i in idx])
            sims = model.logits(feats, queries)
            targets = np.arange(len(idx))
            if symmetric:
                return objectives.symmetric_nce_loss(sims, targets, temperature)
            return objectives.nce_loss(sims, targets, temperature)

        losses.append(objectives.train_step(loss_fn, optimizer))
    return losses


def train_localisation(model: PromptedVideoModel, videos: list[video.VideoSample],
                       names: list[str], train_cfg: TrainConfig,
                       temperature: float, seed: int,
                       steps: int | None = None) -> list[float]:
    """Second-stage classifier training: proposal-pooled features against the
    category classifiers, positives taken from planted instances."""
    steps = steps if steps is not None else train_cfg.step_count
    optimizer = AdamW(model.trainable_parameters(), train_cfg)
    rng = seeded_rng(seed, "train-batch")
    instances = [(v, g) for v in videos for g in v.label]
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(instances), size=min(train_cfg.batch_size,
                                                       len(instances)))

        def loss_fn():
            classifiers = model.classifiers(names)
            feats, labels = [], []
            for i in idx:
                v, gt = instances[i]
                feats.append(model.proposal_feature(
                    v, video.Proposal(gt.start, gt.end)))
                labels.append(gt.class_id)
            sims = model.logits(ag.concat_rows(feats), classifiers)
            return objectives.nce_loss(sims, labels, temperature)

        losses.append(objectives.train_step(loss_fn, optimizer))
    return losses


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def recognition_scores(model: PromptedVideoModel, videos: list[video.VideoSample],
                       names: list[str], seed: int, crops: int = 5) -> np.ndarray:
    """5-crop averaged similarity logits, one row per video."""
    cls = model.classifiers(names).data
    cls = cls / np.linalg.norm(cls, axis=1, keepdims=True)
    rows = []
    for t, sample in enumerate(videos):
        rng = seeded_rng(seed, "eval-crops", t)

        def predict_once(indices, gap):
            f = model.clip_feature(sample, indices, gap).data.reshape(-1)
            return (f / np.linalg.norm(f)) @ cls.T

        rows.append(video.five_crop_predict(
            sample, predict_once, rng, clip_length=model.config.clip_length,
            gap_set=model.config.gap_set, crops=crops))
    return np.stack(rows)


def evaluate_recognition(model, videos, names, seed, crops: int = 5) -> dict:
    scores = recognition_scores(model, videos, names, seed, crops)
    labels = [int(v.label) for v in videos]
    top5 = min(5, len(names))
    return {
        "top1": metrics.top_k_accuracy(scores, labels, 1),
        "top5": metrics.top_k_accuracy(scores, labels, top5),
    }


def evaluate_retrieval(model, videos, seed, crops: int = 5) -> dict:
    queries = ag.concat_rows([model.query_embedding(v.label) for v in videos]).data
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    feats = []
    for t, sample in enumerate(videos):
        rng = seeded_rng(seed, "eval-crops", t)

        def predict_once(indices, gap):
            f = model.clip_feature(sample, indices, gap).data.reshape(-1)
            return f / np.linalg.norm(f)

        f = video.five_crop_predict(sample, predict_once, rng,
                                    clip_length=model.config.clip_length,
                                    gap_set=model.config.gap_set, crops=crops)
        feats.append(f / np.linalg.norm(f))
    sims = np.stack(feats) @ queries.T
    ranks, recalls, mdr = metrics.retrieval_ranks(sims)
    return {"ranks": ranks, **recalls, "MdR": mdr}


def proposals_for_video(sample: video.VideoSample, source: str,
                        rng: np.random.Generator, noise: float = 0.1,
                        per_instance: int = 3) -> list[video.Proposal]:
    """Synthetic first-stage proposal source: the planted instances either
    passed through verbatim or jittered around their boundaries."""
    out = []
    t_total = sample.frames.shape[0]
    for gt in sample.label:
        if source == "planted":
            out.append(video.Proposal(gt.start, gt.end, score=1.0))
            continue
        length = gt.end - gt.start
        for _ in range(per_instance):
            js = gt.start + rng.normal(0.0, noise * length)
            je = gt.end + rng.normal(0.0, noise * length)
            js = float(np.clip(js, 0, t_total - 1))
            je = float(np.clip(je, js + 1.0, t_total))
            out.append(video.Proposal(js, je,
                                      score=float(np.clip(rng.uniform(0.4, 1.0), 0, 1))))
    out.sort(key=lambda p: (-p.score, p.start))
    return out


def evaluate_localisation(model, videos, names, cfg_eval, seed,
                          source: str = "planted", noise: float = 0.1,
                          soft_nms_threshold: float = 0.5) -> dict:
    """Two-stage evaluation: classify proposals, Soft-NMS per class, then
    detection mAP, AR@AN, and proposal classification accuracy."""
    cls = model.classifiers(names).data
    cls = cls / np.linalg.norm(cls, axis=1, keepdims=True)
    ground_truth = [g for v in videos for g in v.label]
    detections: list[metrics.Detection] = []
    proposals_by_video: dict[str, list[video.Proposal]] = {}
    prop_acc_inputs = []
    for t, sample in enumerate(videos):
        rng = seeded_rng(seed, "proposals", t)
        props = proposals_for_video(sample, source, rng, noise)
        proposals_by_video[sample.id] = props
        rows = []
        for p in props:
            f = model.proposal_feature(sample, p).data.reshape(-1)
            sims = (f / np.linalg.norm(f)) @ cls.T
            probs = np.exp(sims / 0.07 - np.max(sims / 0.07))
            probs = probs / probs.sum()
            rows.append(probs)
            best = int(np.argmax(sims))
            detections.append(metrics.Detection(
                proposal=p, class_id=best,
                confidence=float(p.score * probs[best]), video_id=sample.id))
        prop_acc_inputs.append((props, np.asarray(rows), sample.label, sample.id))

    by_class: dict[int, list[metrics.Detection]] = {}
    for d in detections:
        by_class.setdefault(d.class_id, []).append(d)
    suppressed = []
    for c in sorted(by_class):
        suppressed += metrics.soft_nms(by_class[c], soft_nms_threshold)

    _, map_per_thr, avg = metrics.detection_map(suppressed, ground_truth,
                                                cfg_eval.iou_set)
    ar = metrics.average_recall_at_an(proposals_by_video, ground_truth,
                                      cfg_eval.average_number, cfg_eval.recall_grid)
    accs = [metrics.proposal_classification_accuracy(props, rows, gts, vid)
            for props, rows, gts, vid in prop_acc_inputs]
    accs = [a for a in accs if a is not None]
    return {
        "mAP": {f"{thr:g}": v for thr, v in map_per_thr.items()},
        "avg_mAP": avg,
        f"AR@{cfg_eval.average_number}": ar,
        "proposal_top1": float(np.mean(accs)) if accs else None,
    }


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def run_few_shot_trials(cfg: ExperimentConfig, ways: int, shots: int,
                        trials: int, steps: int) -> list[dict]:
    names = datagen.category_names(cfg.data.category_count, cfg.data.name_stem)
    base_model = build_model(cfg, names)
    dataset = build_dataset(cfg, base_model)
    pool = dataset.train + dataset.val
    records = []
    for trial in range(trials):
        rng = seeded_rng(cfg.seed, "episode", trial)
        support, query, way_ids = datagen.sample_few_shot_episode(pool, ways,
                                                                  shots, rng)
        trial_cfg = dataclasses.replace(cfg, seed=cfg.seed * 1000 + trial)
        model = build_model(trial_cfg, names)
        way_names = [names[c] for c in way_ids]
        remap = {c: i for i, c in enumerate(way_ids)}
        support = [video.VideoSample(v.id, v.frames, remap[int(v.label)],
                                     v.category_name) for v in support]
        query = [video.VideoSample(v.id, v.frames, remap[int(v.label)],
                                   v.category_name) for v in query]
        train_recognition(model, support, way_names, cfg.train,
                          cfg.loss.temperature, trial_cfg.seed, steps=steps)
        result = evaluate_recognition(model, query, way_names, trial_cfg.seed,
                                      crops=cfg.eval.crop_count)
        records.append({"metric": "few-shot", "trial": trial, "seed": trial_cfg.seed,
                        "ways": ways, "shots": shots, **result})
    return records


def run_zero_shot(cfg: ExperimentConfig, train_fraction: float = 2 / 3,
                  steps: int | None = None) -> dict:
    """Train prompts on one category side, generate classifiers for the
    disjoint side, compare against the promptless (k=0) baseline."""
    names = datagen.category_names(cfg.data.category_count, cfg.data.name_stem)
    model = build_model(cfg, names)
    dataset = build_dataset(cfg, model)
    split = datagen.split_zero_shot(list(range(len(names))), train_fraction,
                                    seeded_rng(cfg.seed, "zero-shot-split"),
                                    seed=cfg.seed)
    train_ids = sorted(split.train_categories)
    val_ids = sorted(split.val_categories)
    train_videos = [v for v in dataset.train if int(v.label) in split.train_categories]
    remap = {c: i for i, c in enumerate(train_ids)}
    train_videos = [video.VideoSample(v.id, v.frames, remap[int(v.label)],
                                      v.category_name) for v in train_videos]
    train_recognition(model, train_videos, [names[c] for c in train_ids],
                      cfg.train, cfg.loss.temperature, cfg.seed, steps=steps)

    val_videos = [v for v in dataset.val if int(v.label) in split.val_categories]
    val_remap = {c: i for i, c in enumerate(val_ids)}
    val_videos = [video.VideoSample(v.id, v.frames, val_remap[int(v.label)],
                                    v.category_name) for v in val_videos]
    val_names = [names[c] for c in val_ids]
    tuned = evaluate_recognition(model, val_videos, val_names, cfg.seed,
                                 crops=cfg.eval.crop_count)
    baseline_model = build_model(cfg, names, prompt_k=0, temporal_depth=0)
    baseline = evaluate_recognition(baseline_model, val_videos, val_names,
                                    cfg.seed, crops=cfg.eval.crop_count)
    return {"tuned": tuned, "baseline_k0": baseline,
            "train_categories": train_ids, "val_categories": val_ids}


def grad_check_report(width: int = 16, text_depth: int = 2, temporal_depth: int = 1,
                      vocab_size: int = 64, batch: int = 4, seed: int = 0,
                      eps: float = 1e-5) -> dict:
    """Finite-difference verification of the full contrastive loss through
    every trainable tensor, in 64-bit mode."""
    cfg = ExperimentConfig()
    cfg = dataclasses.replace(
        cfg, seed=seed,
        model=ModelConfig(width=width, frame_dim=16, text_depth=text_depth,
                          temporal_depth=temporal_depth, heads=2, mlp_ratio=2,
                          prompt_k=2, clip_length=4, max_frames=32,
                          gap_set=[1, 2], dtype="f64"),
        data=SyntheticSpec(category_count=4, frame_dim=16, frames_per_video=12,
                           videos_per_category_train=2, videos_per_category_val=1,
                           noise_scale=0.3, margin=1.0))
    names = datagen.category_names(cfg.data.category_count)
    model = build_model(cfg, names, vocab_size=vocab_size)
    dataset = build_dataset(cfg, model)
    videos = dataset.train[:batch]
    labels = [int(v.label) for v in videos]
    clip_rng = seeded_rng(seed, "grad-check-clips")
    clips = [video.sample_frames(v, cfg.model.clip_length, cfg.model.gap_set,
                                 clip_rng) for v in videos]

    def evaluate():
        classifiers = model.classifiers(names)
        feats = ag.concat_rows([model.clip_feature(v, idx, gap)
                                for v, (idx, gap) in zip(videos, clips)])
        sims = model.logits(feats, classifiers)
        return objectives.nce_loss(sims, labels, cfg.loss.temperature)

    params = model.trainable_parameters()
    err = ag.finite_diff_check(evaluate, params, eps=eps,
                               max_entries_per_param=8,
                               rng=seeded_rng(seed, "grad-check-picks"))
    entries = sum(min(p.data.size, 8) for p in params)
    return {"max_relative_error": err, "sampled_entries": entries,
            "trainable_tensors": len(params)}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_manifest(out_dir, cfg: ExperimentConfig, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "build": BUILD_ID,
        "command": command,
        "seed": cfg.seed,
        "config": json.loads(cfg.canonical_json()),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
