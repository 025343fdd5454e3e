"""Differentiable dense operations.

Every function takes Tensors (or array-likes for constant operands) and
returns a new Tensor; shape errors raise :class:`~regram.errors.ShapeError`
naming the op and the offending shapes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, record

LEAKY_SLOPE = 0.01


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w) -> Tensor:
    """``x @ w.T`` for a batch of row vectors ``x`` (n, in) and weights ``w`` (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    return record("linear", x.data @ w.data.T, (x, w), lambda g: (g @ w.data, g.T @ x.data))


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return record("concat", out, ts, back)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    tsp = np.tanh(_softplus(x))

    def back(g):
        return (g * (tsp + x * (1.0 - tsp * tsp) * _sigmoid(x)),)

    return record("mish", x * tsp, (a,), back)


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("leaky_relu", np.where(pos, a.data, slope * a.data), (a,),
                  lambda g: (np.where(pos, g, slope * g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), back)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather(a, idx) -> Tensor:
    """Rows ``a[idx]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("gather", a.data[idx], (a,), back)


def segment_sum(a, seg, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets by segment id; empty buckets are zero."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape != a.shape[:1]:
        raise ShapeError(f"segment_sum: {seg.shape[0] if seg.ndim else 0} ids for {a.shape[0]} rows")
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return record("segment_sum", out, (a,), lambda g: (g[seg],))


def weighted_sum(weights, values, seg, n: int) -> Tensor:
    """``out[s] = sum_{i: seg[i]=s} weights[i] * values[i]``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if weights.ndim == 1 and values.ndim == 2:
        weights = reshape(weights, (weights.shape[0], 1))
    return segment_sum(mul(weights, values), seg, n)


def segment_softmax(logits, seg, n: int, tau: float = 1.0) -> Tensor:
    """Softmax of ``logits / tau`` over the rows sharing a segment id.

    ``logits`` is (E,) or (E, H); with two dimensions every column is an
    independent attention head.
    """
    logits = as_tensor(logits)
    if not tau > 0:
        raise ContractError("softmax temperature must be positive")
    if logits.ndim not in (1, 2):
        raise ShapeError(f"segment_softmax: logits must be 1-D or 2-D, got {logits.shape}")
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape != logits.shape[:1]:
        raise ShapeError(f"segment_softmax: {seg.size} ids for {logits.shape[0]} rows")
    tail = logits.shape[1:]
    z = logits.data / tau
    mx = np.full((n,) + tail, -np.inf)
    np.maximum.at(mx, seg, z)
    ez = np.exp(z - mx[seg])
    den = np.zeros((n,) + tail)
    np.add.at(den, seg, ez)
    w = ez / den[seg]

    def back(g):
        dot = np.zeros((n,) + tail)
        np.add.at(dot, seg, g * w)
        return (w * (g - dot[seg]) / tau,)

    return record("segment_softmax", w, (logits,), back)


def softmax(x, tau: float = 1.0) -> Tensor:
    """Row-wise temperature softmax over the last axis of a 2-D tensor."""
    x = as_tensor(x)
    if not tau > 0:
        raise ContractError("softmax temperature must be positive")
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"softmax: expected non-empty (n, k) logits, got {x.shape}")
    z = x.data / tau
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    w = ez / ez.sum(axis=1, keepdims=True)

    def back(g):
        return (w * (g - (g * w).sum(axis=1, keepdims=True)) / tau,)

    return record("softmax", w, (x,), back)


def softmax_temperature(logits, tau: float) -> Tensor:
    """Temperature softmax of a single logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise ShapeError(f"softmax_temperature: expected non-empty vector, got {logits.shape}")
    return reshape(softmax(reshape(logits, (1, logits.shape[0])), tau), (logits.shape[0],))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = 0

    @classmethod
    def fresh(cls, n_features: int) -> "BatchNormState":
        return cls(np.zeros(n_features), np.ones(n_features))


def batchnorm_1d(x, scale_: Tensor, shift: Tensor, state: BatchNormState, mode: str = "train",
                 update_stats: bool = True) -> Tensor:
    """Per-feature batch normalization of ``x`` (batch, features).

    Train mode normalizes by the biased batch variance and folds the batch
    statistics into the running estimates (unbiased variance, as is
    conventional); eval mode uses the running estimates only.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != state.running_mean.shape[0]:
        raise ShapeError(f"batchnorm_1d: input {x.shape} vs {state.running_mean.shape[0]} features")
    eps = state.eps
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat_arr = (x.data - state.running_mean) * inv
        xhat = record("bn_eval", xhat_arr, (x,), lambda g: (g * inv,))
    elif mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ContractError("batchnorm_1d in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat_arr = (x.data - mu) * inv

        def back(g):
            return (inv / n * (n * g - g.sum(axis=0) - xhat_arr * (g * xhat_arr).sum(axis=0)),)

        xhat = record("bn_train", xhat_arr, (x,), back)
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
            state.num_batches += 1
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    return add(mul(xhat, scale_), shift)


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: predictions {pred.shape} vs targets {target.shape}")
    if pred.data.size == 0:
        raise ContractError("mse_loss of an empty batch")
    diff = pred.data - target
    n = diff.size
    return record("mse_loss", np.array((diff * diff).sum() / n), (pred,),
                  lambda g: (g * 2.0 * diff / n,))
