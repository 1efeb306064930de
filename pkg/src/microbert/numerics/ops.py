"""Differentiable ops on :class:`~microbert.numerics.autograd.Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.  Broadcasting follows numpy
rules; gradients are summed back down to each operand's shape.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .autograd import ShapeError, Tensor, make_node

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise binary
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    # a stack of rows times one matrix: one flat gemm is far faster than numpy's batched loop
    flat = b.ndim == 2 and a.ndim > 2
    try:
        if flat:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Numpy indexing (basic or advanced); gradients scatter-add back."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("index", str(exc)) from None
    basic = _is_basic_index(idx)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[idx] += g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return make_node(np.array(out, copy=basic), (a,), backward, "index")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of a (V, H) table by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", f"id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return make_node(out, (weight,), backward, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=ax)

    return make_node(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", f"incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim

    def backward(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return make_node(out, tensors, backward, "stack")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast("masked_fill", a, Tensor(np.zeros(mask.shape)))
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def backward(g):
        return (unbroadcast(np.where(mask, 0, g), a.shape).astype(a.dtype, copy=False),)

    return make_node(out.astype(a.dtype, copy=False), (a,), backward, "masked_fill")


# --------------------------------------------------------------------------
# elementwise nonlinearities
# --------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return make_node(np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,), "relu")


def elu(a: Tensor) -> Tensor:
    positive = a.data > 0
    neg_part = np.expm1(np.minimum(a.data, 0))
    out = np.where(positive, a.data, neg_part).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * np.where(positive, 1, neg_part + 1),), "elu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))
    out = (x * cdf).astype(a.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(a.dtype),)

    return make_node(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# --------------------------------------------------------------------------
# normalizers and losses
# --------------------------------------------------------------------------


def _stable_max(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0).astype(x.dtype)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - _stable_max(a.data, axis)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - _stable_max(a.data, axis)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward, "log_softmax")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Overflow-safe ``log(sum(exp(a)))`` along one axis; ``-inf`` entries allowed."""
    m = _stable_max(a.data, axis)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            weights = np.exp(a.data - lse)
        weights = np.nan_to_num(weights, nan=0.0)
        return (g * weights,)

    return make_node(out, (a,), backward, "logsumexp")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Statistics are accumulated in float64 so a constant row normalizes to
    exact zeros.
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", f"affine shape {gamma.shape} does not match {x.shape}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (centered * rstd).astype(x.dtype)
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = (g * gamma.data).astype(np.float64)
            xh = centered * rstd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xh * (dxhat * xh).mean(axis=-1, keepdims=True)
            )
            gx = gx.astype(x.dtype)
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def dropout(
    a: Tensor,
    p: float,
    rng: Optional[np.random.Generator],
    training: bool = True,
) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) at training time."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: an RNG is required when training")
    if p >= 1.0:
        raise ValueError("dropout: p must be < 1")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    return make_node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of (N, C) logits against N integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError("cross_entropy", f"targets shape {targets.shape} != ({n},)")
    if n == 0:
        raise ShapeError("cross_entropy", "no predictions")
    if targets.min() < 0 or targets.max() >= c:
        raise ShapeError("cross_entropy", f"target out of range for {c} classes")
    shifted = logits.data - _stable_max(logits.data, 1)
    with np.errstate(divide="ignore"):
        log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = log_z - shifted[rows, targets]
    if reduction == "mean":
        out = np.asarray(losses.mean(), dtype=logits.dtype)
        scale = 1.0 / n
    elif reduction == "sum":
        out = np.asarray(losses.sum(), dtype=logits.dtype)
        scale = 1.0
    else:
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, targets] -= 1.0
        return ((probs * (g * scale)).astype(logits.dtype),)

    return make_node(out, (logits,), backward, "cross_entropy")
