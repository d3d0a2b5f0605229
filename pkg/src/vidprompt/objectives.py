"""Normalization, cosine similarity, the contrastive NCE loss, and AdamW.

The loss is the row-wise cross-entropy of the similarity matrix scaled by a
temperature, averaged over the batch; video-to-text direction by default with
an opt-in symmetric variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor


@dataclass
class LossConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 500

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "beta1", "beta2", "eps", "step_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a contrastive loss")


def l2_normalize(x: Tensor) -> Tensor:
    """Divide each row by its Euclidean norm; zero rows are an error."""
    sq = ag.row_sum(ag.mul(x, x))
    if np.any(sq.data <= 0.0):
        raise ValueError("cannot L2-normalize a zero row")
    return ag.mul(x, ag.pow_const(sq, -0.5))


def similarity_matrix(v: Tensor, c: Tensor) -> Tensor:
    """(n, D) x (m, D) -> n x m of cosine similarities (rows pre-normalized)."""
    return ag.matmul(v, ag.transpose(c))


def nce_loss(similarities: Tensor, targets, temperature: float = 0.07) -> Tensor:
    """Mean over rows of -log softmax(similarities / tau)[target].

    Differentiable w.r.t. everything upstream of the similarity matrix.
    """
    n, m = similarities.shape
    if n == 0:
        raise ValueError("empty similarity matrix")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise ValueError("one target index per row required")
    if np.any(targets < 0) or np.any(targets >= m):
        raise ValueError("target index out of range")
    probs = ag.softmax_rows(ag.scale(similarities, 1.0 / temperature))
    onehot = np.zeros((n, m), dtype=similarities.dtype)
    onehot[np.arange(n), targets] = 1.0
    picked = ag.row_sum(ag.mul(probs, Tensor(onehot)))
    return ag.scale(ag.sum_all(ag.log(picked)), -1.0 / n)


def symmetric_nce_loss(similarities: Tensor, targets,
                       temperature: float = 0.07) -> Tensor:
    """Average of the video->text and text->video directions (square S only)."""
    fwd = nce_loss(similarities, targets, temperature)
    bwd = nce_loss(ag.transpose(similarities), targets, temperature)
    return ag.scale(ag.add(fwd, bwd), 0.5)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


class AdamW:
    """Decoupled-weight-decay Adam over the trainable parameters only."""

    def __init__(self, params: list[Parameter], config: TrainConfig):
        self.config = config
        self.params = [p for p in params if p.trainable]
        self.moments = {
            p.name: (np.zeros_like(p.data, dtype=np.float64),
                     np.zeros_like(p.data, dtype=np.float64))
            for p in self.params
        }
        self.step_count = 0

    def step(self, grads: dict[str, Tensor]) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            if p.name not in grads:
                continue
            g = grads[p.name].data.astype(np.float64)
            m, v = self.moments[p.name]
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data
            p.data = p.data - cfg.learning_rate * update.astype(p.data.dtype)


def train_step(loss_fn, optimizer: AdamW) -> float:
    """One optimization step: forward, backward, AdamW update.

    `loss_fn` rebuilds the scalar loss from current parameter values. Frozen
    parameters receive gradients but are never written.
    """
    loss = loss_fn()
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(optimizer.step_count)
    grads = ag.backward(loss)
    optimizer.step(grads)
    return value


def write_loss_csv(path, losses: list[float], learning_rate: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss:.8g},{learning_rate:g}\n")
