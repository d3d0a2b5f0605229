"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are 0-, 1-, or 2-dimensional, stored row-major. Every primitive op
records its parents and a vector-Jacobian closure; `backward` replays the
record in reverse topological order and returns gradients keyed by parameter
name. Gradient accumulation is additive on fan-out; recorded tensors are
never mutated in place.

float32 is the training default; float64 exists for verification only.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32


class DetachedLossWarning(UserWarning):
    """Backward was called on a loss with no reachable parameters."""


class Tensor:
    """A dense array plus an optional position in the gradient record.

    A tensor created from raw data does not track gradients; tensors produced
    by ops on tracked tensors do. Parameters are tracked leaves with a name.
    """

    __slots__ = ("data", "_parents", "_vjp", "_track", "_param_name")

    def __init__(self, data, dtype=None, _parents=(), _vjp=None, _track=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self._parents = _parents
        self._vjp = _vjp
        self._track = _track
        self._param_name = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, tracked={self._track})"

    # convenience operators
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter:
    """Named tensor with a trainable/frozen flag.

    Frozen parameters still appear in the gradient record (prompt vectors
    upstream of frozen layers need signal to flow through), but the optimizer
    never writes to them.
    """

    def __init__(self, name: str, value, trainable: bool = True, dtype=None):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.value._track = True
        self.value._param_name = name
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = np.asarray(arr, dtype=self.value.dtype)

    def __repr__(self):
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp) -> Tensor:
    track = any(p._track for p in parents)
    out = Tensor(data)
    out._parents = tuple(parents) if track else ()
    out._vjp = vjp if track else None
    out._track = track
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive kernels (forward + adjoint)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def pow_const(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)
    return _make(out, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    # row-max subtraction for stability
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)
    return _make(s, (a,), vjp)


def row_sum(a: Tensor) -> Tensor:
    """(n, D) -> (n, 1) sum over each row."""
    out = a.data.sum(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def row_mean(a: Tensor) -> Tensor:
    """(n, D) -> (n, 1) mean over each row."""
    d = a.data.shape[-1]
    out = a.data.mean(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g / d, a.data.shape).copy(),))


def row_var(a: Tensor) -> Tensor:
    """(n, D) -> (n, 1) population variance over each row."""
    d = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    out = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (g * 2.0 * (a.data - mu) / d,))


def mean_rows(a: Tensor) -> Tensor:
    """(n, D) -> (1, D) mean over rows."""
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]
    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)
    return _make(out, (a,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]
    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        return (acc,)
    return _make(out, (a,), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop]
    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        return (acc,)
    return _make(out, (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]
    def vjp(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)
    return _make(out, tuple(parts), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]
    def vjp(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[:, off:off + n])
            off += n
        return tuple(grads)
    return _make(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Gradient of a scalar loss w.r.t. every reachable Parameter.

    Returns a map from parameter name to gradient tensor; parameters the loss
    does not depend on are simply absent. A detached loss yields an empty map
    and a warning.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result: dict[str, Tensor] = {}
    for node in order:
        if node._param_name is not None and id(node) in grads:
            result[node._param_name] = Tensor(grads[id(node)])
    if not result:
        warnings.warn("loss is detached from every parameter", DetachedLossWarning)
    return result


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class NonDeterministicEvaluation(RuntimeError):
    """The model evaluation changed value between identical calls."""


def finite_diff_check(
    evaluate: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_entries_per_param: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central differences.

    `evaluate` must rebuild the loss from current parameter values on every
    call and be deterministic. Returns the maximum relative error over the
    sampled scalar entries, with relative error |a-b| / max(|a|, |b|, 1e-8).
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    base = evaluate()
    again = evaluate()
    if not np.array_equal(base.data, again.data):
        raise NonDeterministicEvaluation(
            "evaluation returned different values for identical inputs")
    analytic = backward(base)

    worst = 0.0
    for param in params:
        if param.name not in analytic:
            continue
        grad = analytic[param.name].data.reshape(-1)
        flat = param.data.reshape(-1)
        n = flat.size
        picks = range(n) if n <= max_entries_per_param else \
            rng.choice(n, size=max_entries_per_param, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(evaluate().data)
            flat[i] = orig - eps
            lo = float(evaluate().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a, b = float(grad[i]), numeric
            err = abs(a - b) / max(abs(a), abs(b), 1e-8)
            worst = max(worst, err)
    return worst
