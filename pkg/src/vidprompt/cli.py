"""Command-line workflows tying all modules into runnable experiments.

Each run writes a manifest (config echo, seed, build id) plus machine-first
reports: metric JSON-lines and a loss CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import data as datagen
from . import experiments, metrics, objectives, text, video
from .config import ConfigError, ExperimentConfig, load_config
from .model import seeded_rng


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.f64:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, dtype="f64"))
    return cfg


def _prepare(cfg: ExperimentConfig):
    names = datagen.category_names(cfg.data.category_count, cfg.data.name_stem)
    model = experiments.build_model(cfg, names)
    dataset = experiments.build_dataset(cfg, model)
    return names, model, dataset


def _emit(out_dir, cfg, command, records, losses=None):
    experiments.write_manifest(out_dir, cfg, command)
    metrics.write_metric_records(os.path.join(out_dir, "metrics.jsonl"), records)
    if losses is not None:
        objectives.write_loss_csv(os.path.join(out_dir, "loss.csv"), losses,
                                  cfg.train.learning_rate)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    _, model, dataset = _prepare(cfg)
    os.makedirs(args.out, exist_ok=True)
    datagen.write_manifest(os.path.join(args.out, "dataset.jsonl"), dataset,
                           cfg.model.gap_set)
    features = {}
    for split in ("train", "val"):
        for v in getattr(dataset, split):
            features[v.id] = model.image_encoder.encode(v.frames)
    video.write_feature_cache(os.path.join(args.out, "features.bin"), features)
    model.vocab.save_words(os.path.join(args.out, "vocab.tsv"))
    experiments.write_manifest(args.out, cfg, "gen-data")
    print(f"wrote {len(features)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    names, model, dataset = _prepare(cfg)
    task = cfg.data.task
    if task == "recognition":
        losses = experiments.train_recognition(model, dataset.train, names,
                                               cfg.train, cfg.loss.temperature,
                                               cfg.seed, steps=args.steps)
    elif task == "retrieval":
        losses = experiments.train_retrieval(model, dataset.train, cfg.train,
                                             cfg.loss.temperature, cfg.seed,
                                             steps=args.steps)
    else:
        losses = experiments.train_localisation(model, dataset.train, names,
                                                cfg.train, cfg.loss.temperature,
                                                cfg.seed, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    digest = ckpt.config_hash(cfg.canonical_json())
    ckpt.save_checkpoint(os.path.join(args.out, "final.ckpt"),
                         ckpt.pack_state(model, step=len(losses),
                                         config_digest=digest))
    _emit(args.out, cfg, "train",
          [{"metric": "train-loss", "final": losses[-1], "steps": len(losses),
            "seed": cfg.seed, "trial": 0}], losses)
    print(f"trained {len(losses)} steps, final loss {losses[-1]:.4f}")
    return 0


def _restore_if_given(args, cfg, model) -> None:
    if getattr(args, "checkpoint", None):
        digest = ckpt.config_hash(cfg.canonical_json())
        ckpt.restore_state(model, ckpt.load_checkpoint(args.checkpoint),
                           expect_config_digest=digest)


def cmd_eval_recognition(args) -> int:
    cfg = _load(args)
    if args.mode == "zero-shot":
        if args.split_file:
            with open(args.split_file, encoding="utf-8") as fh:
                spec = json.load(fh)
            split = datagen.SplitSpec(set(spec["train"]), set(spec["val"]))
            if not split.zero_shot:
                print("error: split sides overlap; zero-shot requires disjoint "
                      "category sets", file=sys.stderr)
                return 1
        result = experiments.run_zero_shot(cfg, steps=args.steps)
        records = [{"metric": "zero-shot", "trial": 0, "seed": cfg.seed, **result}]
        _emit(args.out, cfg, "eval-recognition zero-shot", records)
        print(json.dumps(result["tuned"]))
        return 0
    if args.mode == "few-shot":
        records = experiments.run_few_shot_trials(cfg, args.ways, args.shots,
                                                  args.trials, args.steps or 100)
        _emit(args.out, cfg, "eval-recognition few-shot", records)
        top1 = float(np.mean([r["top1"] for r in records]))
        print(f"few-shot mean TOP1 over {len(records)} trials: {top1:.4f}")
        return 0
    # closed-set
    names, model, dataset = _prepare(cfg)
    losses = experiments.train_recognition(model, dataset.train, names, cfg.train,
                                           cfg.loss.temperature, cfg.seed,
                                           steps=args.steps)
    result = experiments.evaluate_recognition(model, dataset.val, names, cfg.seed,
                                              crops=cfg.eval.crop_count)
    records = [{"metric": "closed-set", "trial": 0, "seed": cfg.seed, **result}]
    _emit(args.out, cfg, "eval-recognition closed-set", records, losses)
    print(json.dumps(result))
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = _load(args)
    if cfg.data.task != "retrieval":
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data,
                                                                task="retrieval"))
    names, model, dataset = _prepare(cfg)
    losses = experiments.train_retrieval(model, dataset.train, cfg.train,
                                         cfg.loss.temperature, cfg.seed,
                                         steps=args.steps)
    result = experiments.evaluate_retrieval(model, dataset.val, cfg.seed,
                                            crops=cfg.eval.crop_count)
    result.pop("ranks", None)
    records = [{"metric": "retrieval", "trial": 0, "seed": cfg.seed, **result}]
    _emit(args.out, cfg, "eval-retrieval", records, losses)
    print(json.dumps(result))
    return 0


def cmd_eval_localisation(args) -> int:
    cfg = _load(args)
    if cfg.data.task != "localisation":
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data,
                                                                task="localisation"))
    names, model, dataset = _prepare(cfg)
    losses = experiments.train_localisation(model, dataset.train, names, cfg.train,
                                            cfg.loss.temperature, cfg.seed,
                                            steps=args.steps)
    result = experiments.evaluate_localisation(
        model, dataset.val, names, cfg.eval, cfg.seed, source=args.proposals,
        noise=args.noise)
    records = [{"metric": "localisation", "trial": 0, "seed": cfg.seed,
                "proposal_source": args.proposals, **result}]
    _emit(args.out, cfg, "eval-localisation", records, losses)
    print(json.dumps(result))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load(args)
    report = experiments.grad_check_report(seed=cfg.seed)
    _emit(args.out, cfg, "grad-check",
          [{"metric": "grad-check", "trial": 0, "seed": cfg.seed, **report}])
    ok = report["max_relative_error"] <= 1e-3
    print(f"max relative error {report['max_relative_error']:.3e} over "
          f"{report['sampled_entries']} entries: {'OK' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_inspect_prompts(args) -> int:
    cfg = _load(args)
    names, model, _ = _prepare(cfg)
    rows = text.nearest_subwords(model.prompt_bank, model.vocab)
    records = [{"metric": "prompt-semantics", "trial": 0, "seed": cfg.seed,
                "slot": slot, "subword": word, "cosine_distance": dist}
               for slot, word, dist in rows]
    _emit(args.out, cfg, "inspect-prompts", records)
    for slot, word, dist in rows:
        print(f"slot {slot:3d}  {word if word is not None else '<zero vector>'}"
              f"{'' if dist is None else f'  {dist:.4f}'}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    path = os.path.join(args.out, "metrics.jsonl")
    if not os.path.exists(path):
        print(f"error: no metrics at {path}", file=sys.stderr)
        return 1
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh]
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    loss_path = os.path.join(args.out, "loss.csv")
    if args.plot and os.path.exists(loss_path):
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
        table = np.genfromtxt(loss_path, delimiter=",", names=True)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(table["step"], table["loss"])
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        svg = os.path.join(args.out, "loss.svg")
        fig.savefig(svg)
        print(f"wrote {svg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidprompt")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="runs/latest")
        p.add_argument("--f64", action="store_true",
                       help="64-bit verification mode")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset + cache")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the task head for the configured task")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-recognition")
    common(p)
    p.add_argument("mode", choices=["closed-set", "few-shot", "zero-shot"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--split", dest="split_file", default=None)
    p.set_defaults(fn=cmd_eval_recognition)

    p = sub.add_parser("eval-retrieval")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("eval-localisation")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--proposals", choices=["planted", "jittered-gt"],
                   default="planted")
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=cmd_eval_localisation)

    p = sub.add_parser("grad-check")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("inspect-prompts")
    common(p)
    p.set_defaults(fn=cmd_inspect_prompts)

    p = sub.add_parser("report")
    common(p)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (objectives.TrainingDiverged, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
