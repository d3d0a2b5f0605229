"""Acceptance gate: ten end-to-end correctness and behaviour criteria.

Each test records a single PASS/FAIL summary line, printed in the terminal
summary after the run.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vidprompt import autograd as ag
from vidprompt import checkpoint as ckpt
from vidprompt import cli
from vidprompt import data as datagen
from vidprompt import experiments, metrics, objectives, text, video
from vidprompt.autograd import Tensor
from vidprompt.config import ExperimentConfig
from vidprompt.data import SyntheticSpec
from vidprompt.metrics import Detection, GroundTruthInstance
from vidprompt.model import ModelConfig, seeded_rng
from vidprompt.objectives import TrainConfig
from vidprompt.video import Proposal

from conftest import acceptance_lines


def _record(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    acceptance_lines.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradients_match_finite_differences():
    t0 = time.time()
    report = experiments.grad_check_report(width=16, text_depth=2,
                                           temporal_depth=1, vocab_size=64,
                                           batch=4)
    elapsed = time.time() - t0
    ok = (report["max_relative_error"] <= 1e-3
          and report["sampled_entries"] >= 100 and elapsed <= 60)
    _record(1, ok, f"max rel err {report['max_relative_error']:.2e} over "
                   f"{report['sampled_entries']} entries in {elapsed:.1f} s "
                   f"(tol 1e-3, 64-bit)")


# ---------------------------------------------------------------------------
# 2. frozen invariance under training
# ---------------------------------------------------------------------------

def test_criterion_2_frozen_tensors_unchanged_after_training(tmp_path):
    cfg = ExperimentConfig(
        model=ModelConfig(width=16, frame_dim=8, text_depth=1, temporal_depth=1,
                          heads=2, mlp_ratio=2, prompt_k=2, clip_length=4,
                          max_frames=32, gap_set=[1, 2]),
        data=SyntheticSpec(category_count=3, frame_dim=8, frames_per_video=12,
                           videos_per_category_train=4,
                           videos_per_category_val=1),
        train=TrainConfig(batch_size=4, learning_rate=1e-3, step_count=200),
        seed=0)
    names = datagen.category_names(3)
    model = experiments.build_model(cfg, names)
    dataset = experiments.build_dataset(cfg)

    before = tmp_path / "step0.ckpt"
    ckpt.save_checkpoint(before, ckpt.pack_state(model, step=0))
    experiments.train_recognition(model, dataset.train, names, cfg.train,
                                  0.07, cfg.seed, steps=200)
    after = tmp_path / "step200.ckpt"
    ckpt.save_checkpoint(after, ckpt.pack_state(model, step=200))

    t0 = {n: arr for n, arr, tr in ckpt.load_checkpoint(before) if not tr}
    t200 = {n: arr for n, arr, tr in ckpt.load_checkpoint(after) if not tr}
    frozen_names = [n for n in t0 if not n.startswith("__")]
    assert any(n.startswith("text.") for n in frozen_names)
    assert "vocab.embedding" in frozen_names
    assert "image.weight" in frozen_names
    identical = all(t0[n].tobytes() == t200[n].tobytes() for n in frozen_names)
    # the trainable side must have actually moved for this to mean anything
    moved = not np.array_equal(
        {n: a for n, a, _ in ckpt.load_checkpoint(before)}["prompt.bank"],
        {n: a for n, a, _ in ckpt.load_checkpoint(after)}["prompt.bank"])
    _record(2, identical and moved,
            f"{len(frozen_names)} frozen tensors byte-identical after 200 "
            f"steps (trainables moved: {moved})")


# ---------------------------------------------------------------------------
# 3. closed-set learning beats the untrained baseline
# ---------------------------------------------------------------------------

def test_criterion_3_closed_set_prompt_tuning():
    t0 = time.time()
    cfg = ExperimentConfig(
        model=ModelConfig(width=64, frame_dim=32, text_depth=2, temporal_depth=2,
                          heads=4, mlp_ratio=2, prompt_k=16, clip_length=16,
                          max_frames=128),
        data=SyntheticSpec(category_count=8, frame_dim=32, frames_per_video=64,
                           videos_per_category_train=20,
                           videos_per_category_val=8,
                           noise_scale=0.5, margin=1.0),  # margin = 2 sigma
        train=TrainConfig(batch_size=16, learning_rate=1e-3, step_count=500),
        seed=1)
    names = datagen.category_names(8)
    model = experiments.build_model(cfg, names)
    dataset = experiments.build_dataset(cfg)

    untrained = experiments.evaluate_recognition(model, dataset.val, names,
                                                 cfg.seed)["top1"]
    experiments.train_recognition(model, dataset.train, names, cfg.train,
                                  0.07, cfg.seed, steps=500)
    trained = experiments.evaluate_recognition(model, dataset.val, names,
                                               cfg.seed)["top1"]
    elapsed = time.time() - t0
    ok = trained >= 0.95 and untrained <= 0.25 and elapsed <= 300
    _record(3, ok, f"TOP1 trained {trained:.3f} (>= 0.95), untrained "
                   f"{untrained:.3f} (<= 0.25, chance 0.125), {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 4. temporal modeling resolves order-sensitive labels
# ---------------------------------------------------------------------------

def test_criterion_4_temporal_gain_on_order_sensitive_data():
    cfg = ExperimentConfig(
        model=ModelConfig(width=64, frame_dim=32, text_depth=2, temporal_depth=2,
                          heads=4, mlp_ratio=2, prompt_k=16, clip_length=16,
                          max_frames=64, gap_set=[1]),
        data=SyntheticSpec(category_count=2, frame_dim=32, frames_per_video=16,
                           videos_per_category_train=30,
                           videos_per_category_val=20,
                           noise_scale=0.05, margin=1.0, order_sensitive=True),
        train=TrainConfig(batch_size=16, learning_rate=5e-4, step_count=600),
        seed=3)
    dataset = experiments.build_dataset(cfg)
    names = dataset.names
    results = {}
    for depth in (0, 2):
        model = experiments.build_model(cfg, names, temporal_depth=depth)
        experiments.train_recognition(model, dataset.train, names, cfg.train,
                                      0.07, cfg.seed, steps=600)
        results[depth] = experiments.evaluate_recognition(
            model, dataset.val, names, cfg.seed)["top1"]
    gain = results[2] - results[0]
    _record(4, gain >= 0.20,
            f"order-sensitive TOP1: temporal depth 2 -> {results[2]:.3f}, "
            f"depth 0 -> {results[0]:.3f}, gain {gain * 100:.1f} points "
            f"(needs >= 20)")


# ---------------------------------------------------------------------------
# 5. zero-shot transfer to unseen categories
# ---------------------------------------------------------------------------

def test_criterion_5_zero_shot_transfer():
    cfg = ExperimentConfig(
        model=ModelConfig(width=64, frame_dim=32, text_depth=2, temporal_depth=0,
                          heads=4, mlp_ratio=2, prompt_k=16, clip_length=16,
                          max_frames=128),
        data=SyntheticSpec(category_count=12, frame_dim=32,
                           videos_per_category_train=30,
                           videos_per_category_val=25,
                           frames_per_video=48, noise_scale=0.45, margin=2.0),
        train=TrainConfig(batch_size=16, learning_rate=1e-3, step_count=300,
                          weight_decay=0.1),
        seed=3)
    # 12 categories at fraction 2/3: 8 train-side, 4 disjoint eval-side
    res = experiments.run_zero_shot(cfg, train_fraction=2 / 3, steps=300)
    tuned = res["tuned"]["top1"]
    baseline = res["baseline_k0"]["top1"]
    assert len(res["train_categories"]) == 8
    assert len(res["val_categories"]) == 4
    ok = tuned >= 0.25 + 0.15 and tuned > baseline
    _record(5, ok, f"unseen-category TOP1 tuned {tuned:.3f} "
                   f"(needs >= 0.40; chance 0.25), untrained k=0 baseline "
                   f"{baseline:.3f}")


# ---------------------------------------------------------------------------
# 6. metric implementations agree with brute-force oracles
# ---------------------------------------------------------------------------

def _oracle_top_k(scores, labels, k):
    hits = 0
    for row, label in zip(scores, labels):
        ranked = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += label in ranked[:k]
    return hits / len(labels)


def _oracle_ranks(sims):
    n = len(sims)
    return [1 + sum(1 for j in range(n) if j != i and sims[i][j] >= sims[i][i])
            for i in range(n)]


def _oracle_soft_nms(dets, thr, floor=1e-3):
    pool = [[d.confidence, i, d] for i, d in enumerate(dets)]
    kept = []
    while pool:
        pool.sort(key=lambda e: (-e[0], e[2].proposal.start, e[1]))
        score, _, best = pool.pop(0)
        kept.append((best.proposal.start, best.proposal.end, score))
        nxt = []
        for e in pool:
            iou = metrics.interval_iou(best.proposal, e[2].proposal)
            s = e[0] * (1.0 - iou) if iou > thr else e[0]
            if s >= floor:
                nxt.append([s, e[1], e[2]])
        pool = nxt
    return kept


def _oracle_ap(flags, num_gt):
    points, tp, fp = [], 0, 0
    for f in flags:
        tp += int(f)
        fp += int(not f)
        points.append((tp / num_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for idx, (r, _) in enumerate(points):
        ap += (r - prev_r) * max(p for _, p in points[idx:])
        prev_r = r
    return ap


def _oracle_map(dets, gts, iou_set):
    out = {}
    for thr in iou_set:
        aps = []
        for cls in sorted({g.class_id for g in gts}):
            cls_dets = sorted(
                [(d, i) for i, d in enumerate(dets) if d.class_id == cls],
                key=lambda e: (-e[0].confidence, e[0].proposal.start, e[1]))
            cls_gts = [g for g in gts if g.class_id == cls]
            used = set()
            flags = []
            for d, _ in cls_dets:
                choices = [
                    (metrics.interval_iou(d.proposal, Proposal(g.start, g.end)), j)
                    for j, g in enumerate(cls_gts)
                    if j not in used and g.video_id == d.video_id]
                choices = [(iou, j) for iou, j in choices if iou >= thr]
                if choices:
                    best = max(choices, key=lambda e: (e[0], -e[1]))
                    used.add(best[1])
                    flags.append(True)
                else:
                    flags.append(False)
            aps.append(_oracle_ap(flags, len(cls_gts)) if flags else 0.0)
        out[thr] = sum(aps) / len(aps)
    return out


def _oracle_ar(props_by_video, gts, an, grid):
    total = 0.0
    for thr in grid:
        hit = 0
        for vid, props in props_by_video.items():
            v_gts = [g for g in gts if g.video_id == vid]
            used = set()
            for p in props[:an]:
                choices = [(metrics.interval_iou(p, Proposal(g.start, g.end)), j)
                           for j, g in enumerate(v_gts) if j not in used]
                choices = [(iou, j) for iou, j in choices if iou >= thr]
                if choices:
                    used.add(max(choices, key=lambda e: (e[0], -e[1]))[1])
                    hit += 1
        total += hit / len(gts)
    return total / len(grid)


def test_criterion_6_metric_oracle_equivalence():
    t_start = time.time()
    rng = np.random.default_rng(42)
    counts = {"top_k": 0, "ranks": 0, "soft_nms": 0, "map": 0, "ar": 0}
    worst = 0.0

    for _ in range(1000):
        n, c = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        scores = rng.integers(0, 4, size=(n, c)).astype(float)
        labels = rng.integers(0, c, size=n)
        k = int(rng.integers(1, c + 1))
        got = metrics.top_k_accuracy(scores, labels, k)
        worst = max(worst, abs(got - _oracle_top_k(scores, labels.tolist(), k)))
        counts["top_k"] += 1

    for _ in range(1000):
        n = int(rng.integers(1, 8))
        sims = rng.integers(0, 5, size=(n, n)).astype(float)
        ranks, _, _ = metrics.retrieval_ranks(sims)
        want = _oracle_ranks(sims.tolist())
        worst = max(worst, max(abs(a - b) for a, b in zip(ranks, want)))
        counts["ranks"] += 1

    for _ in range(1000):
        n = int(rng.integers(1, 7))
        dets = []
        for _i in range(n):
            s = float(rng.uniform(0, 10))
            dets.append(Detection(Proposal(s, s + float(rng.uniform(0.5, 6))),
                                  0, float(rng.choice([0.2, 0.5, 0.5, 0.9]))))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        got = [(d.proposal.start, d.proposal.end, d.confidence)
               for d in metrics.soft_nms(dets, thr)]
        want = _oracle_soft_nms(dets, thr)
        assert len(got) == len(want)
        for g, w in zip(got, want):
            worst = max(worst, abs(g[0] - w[0]), abs(g[1] - w[1]),
                        abs(g[2] - w[2]))
        counts["soft_nms"] += 1

    iou_set = [0.3, 0.5]
    for _ in range(1000):
        vids = ["a", "b"][:int(rng.integers(1, 3))]
        gts = []
        for v in vids:
            for _i in range(int(rng.integers(1, 4))):
                s = float(rng.uniform(0, 20))
                gts.append(GroundTruthInstance(v, int(rng.integers(0, 2)), s,
                                               s + float(rng.uniform(1, 8))))
        dets = []
        for _i in range(int(rng.integers(1, 7))):
            s = float(rng.uniform(0, 20))
            dets.append(Detection(Proposal(s, s + float(rng.uniform(1, 8))),
                                  int(rng.integers(0, 2)),
                                  float(rng.choice([0.2, 0.5, 0.5, 0.9])),
                                  str(rng.choice(vids))))
        _, per_thr, _ = metrics.detection_map(dets, gts, iou_set)
        want = _oracle_map(dets, gts, iou_set)
        for thr in iou_set:
            worst = max(worst, abs(per_thr[thr] - want[thr]))
        counts["map"] += 1

    grid = [0.5, 0.75, 0.95]
    for _ in range(1000):
        gts, props = [], {}
        for v in ("a", "b"):
            for _i in range(int(rng.integers(1, 4))):
                s = float(rng.uniform(0, 20))
                gts.append(GroundTruthInstance(v, 0, s,
                                               s + float(rng.uniform(1, 6))))
            rows = []
            for _i in range(int(rng.integers(1, 5))):
                s = float(rng.uniform(0, 20))
                rows.append(Proposal(s, s + float(rng.uniform(1, 6)),
                                     score=float(rng.uniform(0.1, 1.0))))
            rows.sort(key=lambda p: -p.score)
            props[v] = rows
        an = int(rng.integers(1, 5))
        got = metrics.average_recall_at_an(props, gts, an, grid)
        worst = max(worst, abs(got - _oracle_ar(props, gts, an, grid)))
        counts["ar"] += 1

    elapsed = time.time() - t_start
    ok = worst <= 1e-9 and all(v >= 1000 for v in counts.values()) \
        and elapsed <= 120
    _record(6, ok, f"five metrics vs brute-force oracles: worst abs "
                   f"disagreement {worst:.1e} over {sum(counts.values())} "
                   f"instances in {elapsed:.0f} s (tol 1e-9)")


# ---------------------------------------------------------------------------
# 7. analytic NCE values
# ---------------------------------------------------------------------------

def test_criterion_7_nce_analytic_values():
    single = abs(float(objectives.nce_loss(
        Tensor(np.array([[0.9]], dtype=np.float64)), [0]).data))

    uniform_err = 0.0
    for m in (2, 4, 8):
        sims = Tensor(np.zeros((m, m), dtype=np.float64))
        loss = float(objectives.nce_loss(sims, list(range(m)),
                                         temperature=0.07).data)
        uniform_err = max(uniform_err, abs(loss - math.log(m)))

    oracle = math.log1p(math.exp(-1.0 / 0.07))
    got64 = float(objectives.nce_loss(Tensor(np.eye(2, dtype=np.float64)),
                                      [0, 1], temperature=0.07).data)
    got32 = float(objectives.nce_loss(Tensor(np.eye(2, dtype=np.float32)),
                                      [0, 1], temperature=0.07).data)
    err64, err32 = abs(got64 - oracle), abs(got32 - oracle)

    ok = single < 1e-9 and uniform_err <= 1e-6 and err64 <= 1e-6 \
        and err32 <= 1e-4
    _record(7, ok, f"single-pair {single:.1e}, ln(m) err {uniform_err:.1e} "
                   f"(tol 1e-6), 2x2 tau=0.07 err {err64:.1e} 64-bit / "
                   f"{err32:.1e} 32-bit (tol 1e-6 / 1e-4)")


# ---------------------------------------------------------------------------
# 8. pooling identity on full-cover proposals
# ---------------------------------------------------------------------------

def test_criterion_8_full_cover_proposal_equals_snippet_pool():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        t = int(rng.integers(1, 40))
        clip = Tensor(rng.standard_normal((t, 8)).astype(np.float32))
        times = [float(i) for i in range(t)]
        snippet = video.mean_pool_snippet(clip).data
        proposal = video.mean_pool_proposal(clip, Proposal(0.0, float(t)),
                                            times).data
        if snippet.tobytes() != proposal.tobytes():
            mismatches += 1
    _record(8, mismatches == 0,
            f"full-cover proposal pool bit-identical to snippet pool on "
            f"100 random clips ({mismatches} mismatches)")


# ---------------------------------------------------------------------------
# 9. run-level determinism
# ---------------------------------------------------------------------------

def test_criterion_9_identical_runs_are_byte_identical(tmp_path):
    config = {
        "model": {"width": 16, "frame_dim": 8, "text_depth": 1,
                  "temporal_depth": 1, "heads": 2, "mlp_ratio": 2,
                  "prompt_k": 2, "clip_length": 4, "max_frames": 16,
                  "gap_set": [1, 2]},
        "data": {"category_count": 3, "frame_dim": 8, "frames_per_video": 10,
                 "videos_per_category_train": 3, "videos_per_category_val": 2,
                 "noise_scale": 0.3, "margin": 1.5},
        "train": {"batch_size": 4, "learning_rate": 0.001, "step_count": 5},
        "seed": 11,
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))

    for run in ("one", "two"):
        out = str(tmp_path / run)
        assert cli.main(["train", "--config", str(cfg_path), "--out", out]) == 0
        assert cli.main(["eval-recognition", "closed-set", "--config",
                         str(cfg_path), "--out", str(tmp_path / (run + "-eval")),
                         "--steps", "5"]) == 0

    same_ckpt = (tmp_path / "one" / "final.ckpt").read_bytes() == \
        (tmp_path / "two" / "final.ckpt").read_bytes()
    same_train = (tmp_path / "one" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "two" / "metrics.jsonl").read_bytes()
    same_eval = (tmp_path / "one-eval" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "two-eval" / "metrics.jsonl").read_bytes()
    _record(9, same_ckpt and same_train and same_eval,
            f"checkpoint bytes identical: {same_ckpt}, train report: "
            f"{same_train}, eval report: {same_eval}")


# ---------------------------------------------------------------------------
# 10. token-budget discipline
# ---------------------------------------------------------------------------

def test_criterion_10_token_budget_property():
    rng_words = np.random.default_rng(0)
    vocab = text.Vocabulary([f"w{i}" for i in range(30)], width=4,
                            rng=rng_words)
    banks = {k: text.PromptBank(k, 4, rng=np.random.default_rng(k))
             for k in (0, 4, 16)}
    examined = {"n": 0}

    @given(st.integers(1, 120), st.sampled_from([0, 4, 16]),
           st.integers(0, 10_000))
    @settings(deadline=None, max_examples=200)
    def check(n_tokens, k, seed):
        ids = np.random.default_rng(seed).integers(
            4, len(vocab), size=n_tokens).tolist()
        bank = banks[k]
        seq = text.inject_prompts(text.TokenSequence(ids), bank, vocab,
                                  budget=77)
        assert seq.shape[0] <= 77
        kept = min(n_tokens, 77 - 2 * k - 2)
        assert seq.shape[0] == 2 * k + kept + 2
        np.testing.assert_array_equal(seq.data[1:1 + k], bank.vectors.data[:k])
        np.testing.assert_array_equal(
            seq.data[1 + k + kept:1 + 2 * k + kept], bank.vectors.data[k:])
        examined["n"] += 1

    check()
    _record(10, examined["n"] >= 200,
            f"injected length <= 77 and prompt pattern intact over "
            f"{examined['n']} generated cases, k in {{0, 4, 16}}")
