"""Frame sampling, frozen frame-feature extraction, temporal encoding, pooling.

Raw pixels are abstracted to F-dimensional frame vectors; the frozen image
encoder is a seeded linear map + GELU + layer norm evaluated in plain numpy,
so features can be precomputed and cached (no gradient below its output).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import autograd as ag
from . import nn
from .autograd import Parameter, Tensor

DEFAULT_CLIP_LENGTH = 16
RECOGNITION_GAP_SET = [1, 2, 3, 4, 5, 6, 10, 15]
RETRIEVAL_GAP_SET = [10, 15, 30]


@dataclass
class VideoSample:
    """A full video as T_total x F frame vectors plus its annotation.

    `label` is a category id for recognition, a query string for retrieval, or
    a list of (category-id, start, end) instances for untrimmed timelines.
    """

    id: str
    frames: np.ndarray
    label: object
    category_name: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a T_total x F matrix with T_total >= 1")


@dataclass
class FrameFeatures:
    features: np.ndarray  # T x D
    frame_indices: list[int]
    gap: int


@dataclass
class Proposal:
    start: float
    end: float
    score: float = 1.0

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"degenerate interval [{self.start}, {self.end})")


def sample_frames(video: VideoSample, clip_length: int, gap_set: list[int],
                  rng: np.random.Generator) -> tuple[list[int], int]:
    """Random gap from the feasible subset of gap_set, random start; if no gap
    fits, gap 1 with the last frame repeated as padding."""
    if clip_length < 1:
        raise ValueError("clip_length must be >= 1")
    if not gap_set:
        raise ValueError("empty gap set")
    t_total = video.frames.shape[0]
    feasible = [g for g in gap_set if (clip_length - 1) * g <= t_total - 1]
    if not feasible:
        indices = [min(i, t_total - 1) for i in range(clip_length)]
        return indices, 1
    gap = int(rng.choice(feasible))
    start = int(rng.integers(0, t_total - (clip_length - 1) * gap))
    return [start + i * gap for i in range(clip_length)], gap


class FrozenImageEncoder:
    """Deterministic per-frame map: seeded linear F->D, GELU, layer norm.

    Runs in plain numpy; its output enters the gradient record as a constant.
    """

    def __init__(self, frame_dim: int, width: int, rng: np.random.Generator,
                 dtype=ag.DEFAULT_DTYPE):
        std = frame_dim ** -0.5
        self.weight = Parameter("image.weight",
                                rng.normal(0.0, std, size=(frame_dim, width)).astype(dtype),
                                trainable=False)
        self.bias = Parameter("image.bias",
                              rng.normal(0.0, std, size=width).astype(dtype),
                              trainable=False)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def encode(self, frames: np.ndarray) -> np.ndarray:
        x = np.asarray(frames, dtype=self.weight.data.dtype)
        h = x @ self.weight.data + self.bias.data
        h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        return ((h - mu) / np.sqrt(var + nn.LAYER_NORM_EPS)).astype(self.weight.data.dtype)


def encode_frames(video: VideoSample, indices: list[int],
                  encoder: FrozenImageEncoder, gap: int) -> FrameFeatures:
    feats = encoder.encode(video.frames[np.asarray(indices, dtype=np.intp)])
    return FrameFeatures(features=feats, frame_indices=list(indices), gap=gap)


def encode_video(ff: FrameFeatures, table: nn.TemporalPositionTable,
                 config: nn.TransformerConfig, params: dict[str, Parameter],
                 prefix: str = "temporal") -> Tensor:
    """Temporal transformer over frozen features + positional encoding."""
    x = ag.add(Tensor(ff.features),
               nn.temporal_positional_encoding(ff.frame_indices, ff.gap, table))
    return nn.transformer_encoder_forward(x, config, params, prefix)


def mean_pool_snippet(v: Tensor) -> Tensor:
    """(T, D) -> (1, D) arithmetic mean over frames."""
    if v.shape[0] < 1:
        raise ValueError("cannot pool an empty clip")
    return ag.mean_rows(v)


class EmptyProposalError(ValueError):
    """The proposal interval covers no frame time."""


def mean_pool_proposal(v: Tensor, proposal: Proposal,
                       frame_times: list[float]) -> Tensor:
    """Mean over rows whose frame time lies in [start, end)."""
    covered = [i for i, t in enumerate(frame_times)
               if proposal.start <= t < proposal.end]
    if not covered:
        raise EmptyProposalError(
            f"no frame time falls inside [{proposal.start}, {proposal.end})")
    return ag.mean_rows(ag.take_rows(v, covered))


def five_crop_predict(video: VideoSample, predict_once, rng: np.random.Generator,
                      clip_length: int = DEFAULT_CLIP_LENGTH,
                      gap_set: list[int] = tuple(RECOGNITION_GAP_SET),
                      crops: int = 5) -> np.ndarray:
    """Average predictions over independently sampled clips."""
    preds = []
    for _ in range(crops):
        indices, gap = sample_frames(video, clip_length, list(gap_set), rng)
        preds.append(np.asarray(predict_once(indices, gap)))
    return np.mean(preds, axis=0)


# ---------------------------------------------------------------------------
# feature cache: per video, "id length, id, T, D, row-major f32 LE"
# ---------------------------------------------------------------------------

def write_feature_cache(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for vid in features:
            arr = np.ascontiguousarray(features[vid], dtype="<f4")
            raw_id = vid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def read_feature_cache(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                break
            (id_len,) = struct.unpack("<H", head)
            vid = fh.read(id_len).decode("utf-8")
            t, d = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(4 * t * d), dtype="<f4")
            out[vid] = data.reshape(t, d).copy()
    return out
