"""Transformer building blocks shared by the text and temporal encoders.

Pre-norm residual blocks with multi-head self-attention and a GELU MLP, plus
the learnable temporal position tables (frame index + sampling gap).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor

LAYER_NORM_EPS = 1e-5
TRAINABLE_INIT_STD = 0.01  # all trainable tensors start from N(0, 0.01)


@dataclass
class TransformerConfig:
    depth: int
    width: int
    heads: int
    mlp_ratio: int = 4
    max_seq_len: int = 128

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def init_transformer_params(
    config: TransformerConfig,
    prefix: str,
    rng: np.random.Generator,
    trainable: bool,
    dtype=ag.DEFAULT_DTYPE,
    weight_std: float | None = None,
) -> dict[str, Parameter]:
    """Create all weights for one encoder stack under a name prefix.

    Trainable stacks default to N(0, 0.01); a frozen stack stands in for a
    pretrained backbone and uses a 1/sqrt(D) scale so it computes something
    non-trivial.
    """
    d = config.width
    hidden = d * config.mlp_ratio
    std = weight_std if weight_std is not None else (
        TRAINABLE_INIT_STD if trainable else d ** -0.5)

    params: dict[str, Parameter] = {}

    def mat(name, rows, cols):
        params[name] = Parameter(
            name, rng.normal(0.0, std, size=(rows, cols)).astype(dtype), trainable)

    def vec(name, size, value=None):
        data = np.full(size, value, dtype=dtype) if value is not None else \
            rng.normal(0.0, std, size=size).astype(dtype)
        params[name] = Parameter(name, data, trainable)

    for i in range(config.depth):
        p = f"{prefix}.layer{i}"
        vec(f"{p}.ln1.gamma", d, value=1.0)
        vec(f"{p}.ln1.beta", d, value=0.0)
        mat(f"{p}.attn.wq", d, d)
        mat(f"{p}.attn.wk", d, d)
        mat(f"{p}.attn.wv", d, d)
        mat(f"{p}.attn.wo", d, d)
        vec(f"{p}.ln2.gamma", d, value=1.0)
        vec(f"{p}.ln2.beta", d, value=0.0)
        mat(f"{p}.mlp.w1", d, hidden)
        vec(f"{p}.mlp.b1", hidden, value=0.0)
        mat(f"{p}.mlp.w2", hidden, d)
        vec(f"{p}.mlp.b2", d, value=0.0)
    return params


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    mu = ag.row_mean(x)
    var = ag.row_var(x)
    centered = ag.sub(x, mu)
    eps = Tensor(np.asarray(LAYER_NORM_EPS, dtype=var.dtype))
    inv_std = ag.pow_const(ag.add(var, eps), -0.5)
    return ag.add(ag.mul(ag.mul(centered, inv_std), gamma), beta)


def multi_head_self_attention(
    x: Tensor, params: dict[str, Parameter], prefix: str, config: TransformerConfig
) -> Tensor:
    """Full (non-causal) scaled dot-product attention, heads concatenated."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("attention requires at least one token")
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max {config.max_seq_len}")
    q = ag.matmul(x, params[f"{prefix}.attn.wq"].value)
    k = ag.matmul(x, params[f"{prefix}.attn.wk"].value)
    v = ag.matmul(x, params[f"{prefix}.attn.wv"].value)
    dh = config.head_dim
    outs = []
    for h in range(config.heads):
        a, b = h * dh, (h + 1) * dh
        qh, kh, vh = ag.slice_cols(q, a, b), ag.slice_cols(k, a, b), ag.slice_cols(v, a, b)
        att = ag.softmax_rows(ag.scale(ag.matmul(qh, ag.transpose(kh)), dh ** -0.5))
        outs.append(ag.matmul(att, vh))
    merged = outs[0] if len(outs) == 1 else ag.concat_cols(outs)
    return ag.matmul(merged, params[f"{prefix}.attn.wo"].value)


def mlp(x: Tensor, params: dict[str, Parameter], prefix: str) -> Tensor:
    h = ag.gelu(ag.add(ag.matmul(x, params[f"{prefix}.mlp.w1"].value),
                       params[f"{prefix}.mlp.b1"].value))
    return ag.add(ag.matmul(h, params[f"{prefix}.mlp.w2"].value),
                  params[f"{prefix}.mlp.b2"].value)


def transformer_encoder_forward(
    x: Tensor, config: TransformerConfig, params: dict[str, Parameter], prefix: str
) -> Tensor:
    """depth x (pre-norm attention block, pre-norm MLP block), residual."""
    for i in range(config.depth):
        p = f"{prefix}.layer{i}"
        normed = layer_norm(x, params[f"{p}.ln1.gamma"].value, params[f"{p}.ln1.beta"].value)
        x = ag.add(x, multi_head_self_attention(normed, params, p, config))
        normed = layer_norm(x, params[f"{p}.ln2.gamma"].value, params[f"{p}.ln2.beta"].value)
        x = ag.add(x, mlp(normed, params, p))
    return x


class UnknownGapError(KeyError):
    def __init__(self, gap):
        super().__init__(f"no positional entry for frame gap {gap}")
        self.gap = gap


@dataclass
class TemporalPositionTable:
    """Learnable frame-index rows plus one learnable vector per allowed gap."""

    index_table: Parameter
    gap_table: dict[int, Parameter] = field(default_factory=dict)

    @classmethod
    def create(cls, max_frames: int, width: int, gap_set: list[int],
               rng: np.random.Generator, prefix: str = "pos",
               dtype=ag.DEFAULT_DTYPE) -> "TemporalPositionTable":
        index = Parameter(
            f"{prefix}.index",
            rng.normal(0.0, TRAINABLE_INIT_STD, size=(max_frames, width)).astype(dtype))
        gaps = {
            int(g): Parameter(
                f"{prefix}.gap{g}",
                rng.normal(0.0, TRAINABLE_INIT_STD, size=(1, width)).astype(dtype))
            for g in gap_set
        }
        return cls(index_table=index, gap_table=gaps)

    def parameters(self) -> list[Parameter]:
        return [self.index_table] + [self.gap_table[g] for g in sorted(self.gap_table)]


def temporal_positional_encoding(
    frame_indices: list[int], gap: int, table: TemporalPositionTable
) -> Tensor:
    """Row t = index_table[frame_indices[t]] + gap_table[gap]."""
    max_frames = table.index_table.data.shape[0]
    for idx in frame_indices:
        if not 0 <= idx < max_frames:
            raise ValueError(f"frame index {idx} outside position table of {max_frames}")
    if int(gap) not in table.gap_table:
        raise UnknownGapError(gap)
    rows = ag.take_rows(table.index_table.value, frame_indices)
    return ag.add(rows, table.gap_table[int(gap)].value)
