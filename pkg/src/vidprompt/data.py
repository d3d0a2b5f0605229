"""Synthetic dataset generation and split protocols.

Categories carry human-readable pseudo-names ("cat-007-alpha") so the text
path is exercised end to end. Prototypes are random unit directions in frame
space by default; a caller may supply a prototype function to tie visual
content to category names (needed for meaningful zero-shot transfer).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import GroundTruthInstance
from .video import VideoSample

_NATO = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
         "hotel", "india", "juliett", "kilo", "lima", "mike", "november",
         "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
         "victor", "whiskey", "xray", "yankee", "zulu"]


def category_names(count: int, stem: str = "cat") -> list[str]:
    return [f"{stem}-{i:03d}-{_NATO[i % len(_NATO)]}" for i in range(count)]


def pseudo_sentence(name: str) -> str:
    """Deterministic retrieval caption naming a category prototype."""
    return f"a video showing the {name} motion pattern"


@dataclass
class SyntheticSpec:
    category_count: int = 8
    frame_dim: int = 32
    videos_per_category_train: int = 20
    videos_per_category_val: int = 8
    frames_per_video: int = 64
    noise_scale: float = 0.5
    margin: float = 1.0          # prototype magnitude relative to the noise
    drift_scale: float = 0.1
    domain_shift: float = 0.0    # shared off-prototype component in all content
    task: str = "recognition"    # recognition | retrieval | localisation
    order_sensitive: bool = False
    name_stem: str = "cat"
    # localisation only
    timeline_length: int = 160
    max_instances: int = 15

    def __post_init__(self):
        if self.category_count < 2:
            raise ValueError("need at least two categories")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be >= 0")
        if self.task not in ("recognition", "retrieval", "localisation"):
            raise ValueError(f"unknown task kind {self.task!r}")
        if self.noise_scale > 0 and self.margin <= self.noise_scale:
            warnings.warn("margin <= noise: dataset may be unlearnable")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    names: list[str]
    prototypes: np.ndarray       # C x F unit directions
    train: list[VideoSample]
    val: list[VideoSample]

    def by_category(self, split: str) -> dict[int, list[VideoSample]]:
        out: dict[int, list[VideoSample]] = {}
        for v in getattr(self, split):
            out.setdefault(int(v.label), []).append(v)
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _make_frames(proto: np.ndarray, spec: SyntheticSpec,
                 rng: np.random.Generator, end_proto: np.ndarray | None = None
                 ) -> np.ndarray:
    t = spec.frames_per_video
    phase = rng.uniform(0.0, 2.0 * np.pi)
    drift_dir = _unit(rng.normal(size=proto.shape))
    ts = np.arange(t)
    drift = (spec.drift_scale * spec.margin *
             np.sin(2.0 * np.pi * ts / t + phase)[:, None] * drift_dir[None, :])
    if end_proto is None:
        base = np.broadcast_to(spec.margin * proto, (t, proto.size)).copy()
    else:
        # order-sensitive content: sweep from one prototype to the other
        w = (ts / max(t - 1, 1))[:, None]
        base = spec.margin * ((1.0 - w) * proto[None, :] + w * end_proto[None, :])
    noise = spec.noise_scale * rng.normal(size=(t, proto.size))
    return (base + drift + noise).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticSpec, rng: np.random.Generator,
                               prototype_fn=None) -> SyntheticDataset:
    """Per category: a frozen prototype direction; per video: prototype +
    temporal drift + Gaussian noise. Deterministic given the generator state."""
    if spec.order_sensitive:
        return _generate_order_dataset(spec, rng)
    names = category_names(spec.category_count, spec.name_stem)
    if prototype_fn is not None:
        prototypes = np.stack([_unit(np.asarray(prototype_fn(n), dtype=np.float64))
                               for n in names])
    else:
        prototypes = np.stack([_unit(rng.normal(size=spec.frame_dim))
                               for _ in names])
    if spec.domain_shift > 0.0:
        # one fixed direction mixed into every category: a systematic gap
        # between content and name semantics that adaptation has to bridge
        shift = _unit(rng.normal(size=spec.frame_dim))
        prototypes = np.stack([_unit(p + spec.domain_shift * shift)
                               for p in prototypes])
    if spec.task == "localisation":
        return _generate_localisation(spec, names, prototypes, rng)

    def make_split(count_per_cat: int, split: str) -> list[VideoSample]:
        out = []
        for c, name in enumerate(names):
            for i in range(count_per_cat):
                frames = _make_frames(prototypes[c], spec, rng)
                label = pseudo_sentence(name) if spec.task == "retrieval" else c
                out.append(VideoSample(id=f"{split}-{name}-{i:03d}", frames=frames,
                                       label=label, category_name=name))
        return out

    return SyntheticDataset(spec, names, prototypes,
                            make_split(spec.videos_per_category_train, "train"),
                            make_split(spec.videos_per_category_val, "val"))


def _generate_order_dataset(spec: SyntheticSpec,
                            rng: np.random.Generator) -> SyntheticDataset:
    """Label depends on frame order: category 2p sweeps A->B, 2p+1 sweeps B->A."""
    if spec.category_count % 2 != 0:
        raise ValueError("order-sensitive datasets need an even category count")
    pairs = spec.category_count // 2
    names = []
    for p in range(pairs):
        stem = f"{spec.name_stem}-{p:03d}"
        names += [f"{stem}-fwd", f"{stem}-rev"]
    anchors = [( _unit(rng.normal(size=spec.frame_dim)),
                 _unit(rng.normal(size=spec.frame_dim))) for _ in range(pairs)]
    prototypes = np.stack([a if c % 2 == 0 else b
                           for p, (a, b) in enumerate(anchors)
                           for c in (0, 1)])

    def make_split(count_per_cat: int, split: str) -> list[VideoSample]:
        out = []
        for c, name in enumerate(names):
            a, b = anchors[c // 2]
            start, end = (a, b) if c % 2 == 0 else (b, a)
            for i in range(count_per_cat):
                frames = _make_frames(start, spec, rng, end_proto=end)
                out.append(VideoSample(id=f"{split}-{name}-{i:03d}", frames=frames,
                                       label=c, category_name=name))
        return out

    return SyntheticDataset(spec, names, prototypes,
                            make_split(spec.videos_per_category_train, "train"),
                            make_split(spec.videos_per_category_val, "val"))


def _generate_localisation(spec: SyntheticSpec, names: list[str],
                           prototypes: np.ndarray,
                           rng: np.random.Generator) -> SyntheticDataset:
    """Untrimmed timelines with 1..max_instances planted action instances."""

    def make_split(count: int, split: str) -> list[VideoSample]:
        out = []
        for i in range(count):
            t = spec.timeline_length
            frames = (spec.noise_scale *
                      rng.normal(size=(t, spec.frame_dim))).astype(np.float32)
            instances = []
            n_inst = int(rng.integers(1, spec.max_instances + 1))
            for _ in range(n_inst):
                length = int(rng.integers(4, max(5, t // 8)))
                start = int(rng.integers(0, t - length))
                cls = int(rng.integers(0, len(names)))
                frames[start:start + length] += (
                    spec.margin * prototypes[cls]).astype(np.float32)
                instances.append(GroundTruthInstance(
                    video_id=f"{split}-timeline-{i:03d}", class_id=cls,
                    start=float(start), end=float(start + length)))
            out.append(VideoSample(id=f"{split}-timeline-{i:03d}", frames=frames,
                                   label=instances))
        return out

    n_train = spec.videos_per_category_train
    n_val = spec.videos_per_category_val
    return SyntheticDataset(spec, names, prototypes,
                            make_split(n_train, "train"), make_split(n_val, "val"))


# ---------------------------------------------------------------------------
# split protocols
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_categories: set[int]
    val_categories: set[int]
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        self.train_categories = set(self.train_categories)
        self.val_categories = set(self.val_categories)

    @property
    def zero_shot(self) -> bool:
        return not (self.train_categories & self.val_categories)


class InsufficientVideosError(ValueError):
    def __init__(self, category, needed, available):
        super().__init__(
            f"category {category} has {available} videos, needs > {needed}")
        self.category = category


def sample_few_shot_episode(pool: list[VideoSample], n_way: int, k_shot: int,
                            rng: np.random.Generator):
    """N categories uniform without replacement, K support videos each; all
    remaining videos of the chosen categories form the query set."""
    by_cat: dict[int, list[VideoSample]] = {}
    for v in pool:
        by_cat.setdefault(int(v.label), []).append(v)
    eligible = sorted(c for c, vids in by_cat.items() if len(vids) > k_shot)
    for c in sorted(by_cat):
        if len(by_cat[c]) <= k_shot:
            raise InsufficientVideosError(c, k_shot, len(by_cat[c]))
    if len(eligible) < n_way:
        raise ValueError(f"pool has {len(eligible)} categories, needs {n_way}")
    ways = sorted(rng.choice(eligible, size=n_way, replace=False).tolist())
    support, query = [], []
    for c in ways:
        vids = by_cat[c]
        picked = set(rng.choice(len(vids), size=k_shot, replace=False).tolist())
        support += [vids[i] for i in sorted(picked)]
        query += [vids[i] for i in range(len(vids)) if i not in picked]
    return support, query, ways


def build_c_way_support(train: list[VideoSample], k_shot: int,
                        rng: np.random.Generator) -> list[VideoSample]:
    """K support videos per category over all categories; the standard test
    split stays untouched by construction."""
    by_cat: dict[int, list[VideoSample]] = {}
    for v in train:
        by_cat.setdefault(int(v.label), []).append(v)
    support = []
    for c in sorted(by_cat):
        vids = by_cat[c]
        if len(vids) < k_shot:
            raise InsufficientVideosError(c, k_shot - 1, len(vids))
        picked = sorted(rng.choice(len(vids), size=k_shot, replace=False).tolist())
        support += [vids[i] for i in picked]
    return support


def split_zero_shot(categories: list[int], train_fraction: float,
                    rng: np.random.Generator, trials: int = 1,
                    seed: int = 0) -> SplitSpec:
    """Disjoint random partition; train side rounded down."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must be in (0, 1)")
    cats = list(categories)
    n_train = int(len(cats) * train_fraction)
    if n_train == 0 or n_train == len(cats):
        raise ValueError(f"fraction {train_fraction} leaves an empty side")
    perm = rng.permutation(len(cats))
    train = {cats[i] for i in perm[:n_train]}
    val = {cats[i] for i in perm[n_train:]}
    return SplitSpec(train_categories=train, val_categories=val,
                     trials=trials, seed=seed)


def divide_multilabel_videos(videos: list[VideoSample], split: SplitSpec):
    """Videos mixing train- and val-side instances are duplicated into two
    videos, each keeping only its side's instances."""
    train_out, val_out = [], []
    for v in videos:
        instances: list[GroundTruthInstance] = v.label
        t_side = [g for g in instances if g.class_id in split.train_categories]
        v_side = [g for g in instances if g.class_id in split.val_categories]
        if len(t_side) + len(v_side) != len(instances):
            bad = [g.class_id for g in instances
                   if g.class_id not in split.train_categories
                   and g.class_id not in split.val_categories]
            raise ValueError(f"instance categories {bad} belong to neither side")
        if t_side and v_side:
            train_out.append(VideoSample(id=v.id + "-train", frames=v.frames,
                                         label=t_side))
            val_out.append(VideoSample(id=v.id + "-val", frames=v.frames,
                                       label=v_side))
        elif t_side:
            train_out.append(v)
        elif v_side:
            val_out.append(v)
    return train_out, val_out


def write_manifest(path, dataset: SyntheticDataset, gap_set: list[int]) -> None:
    """JSON-lines manifest, one record per video."""
    with open(path, "w", encoding="utf-8") as fh:
        for split in ("train", "val"):
            for v in getattr(dataset, split):
                label = v.label
                if isinstance(label, list):
                    label = [{"class_id": g.class_id, "start": g.start, "end": g.end}
                             for g in label]
                rec = {"id": v.id, "split": split, "label": label,
                       "frame_count": int(v.frames.shape[0]),
                       "gap_set": list(gap_set)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
