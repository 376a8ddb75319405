"""Differentiable primitives.

Every op computes its forward value with numpy, checks it is finite and,
when any input requires grad, records a backward closure mapping the output
gradient to one gradient per parent.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, as_tensor

LAYER_NORM_EPS = 1e-12
L2_NORM_EPS = 1e-12


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):
        out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):
        out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):
        out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    with np.errstate(all="ignore"):
        out = a.data * c
    return _result(out, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = a.data * a.data
    return _result(out, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


# -- activations -----------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def prelu(a, slope) -> Tensor:
    """max(0, x) + slope * min(0, x); ``slope`` broadcasts against ``a``."""
    a, slope = as_tensor(a), as_tensor(slope)
    mask = a.data > 0
    with np.errstate(all="ignore"):
        out = np.where(mask, a.data, slope.data * a.data)

    def backward(g):
        ga = np.where(mask, g, g * slope.data)
        gs = _unbroadcast(np.where(mask, 0.0, g * a.data), slope.shape)
        return _unbroadcast(ga, a.shape), gs

    return _result(out, (a, slope), backward, "prelu")


# -- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands; use mul for scalars")
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    if A.shape[-1] != B.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    with np.errstate(all="ignore"):
        full = A @ B
    out = full
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        G = g.reshape(full.shape)
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, ts, backward, "concat")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; indices may repeat (gradients accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)
    ax = axis % a.ndim

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, ax, 0)  # view into ga
        src = list(range(ax, ax + idx.ndim))
        np.add.at(moved, idx, np.moveaxis(g, src, list(range(idx.ndim))))
        return (ga,)

    return _result(out, (a,), backward, "take")


def row_select(a, rows) -> Tensor:
    return take(a, rows, axis=0)


def embedding_lookup(table, ids) -> Tensor:
    return take(table, ids, axis=0)


def index(a, key) -> Tensor:
    """Basic (non-fancy) numpy indexing, e.g. ``x[:, -1]``."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _result(np.array(out, copy=True), (a,), backward, "index")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """out[j] = sum of rows of ``a`` whose segment id is j."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _result(out, (a,), lambda g: (g[seg],), "segment_sum")


# -- reductions ------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisations --------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment."""
    scores = as_tensor(scores)
    seg = np.asarray(segment_ids, dtype=np.int64)
    x = scores.data
    top = np.full(num_segments, -np.inf)
    np.maximum.at(top, seg, x)
    e = np.exp(x - top[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    s = e / denom[seg]

    def backward(g):
        inner = np.zeros(num_segments)
        np.add.at(inner, seg, g * s)
        return (s * (g - inner[seg]),)

    return _result(s, (scores,), backward, "segment_softmax")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean, unit-variance rows over the last axis (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (a,), backward, "layer_norm")


def l2_normalize(a, eps: float = L2_NORM_EPS) -> Tensor:
    """x / max(||x||, eps) over the last axis."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = a.data / denom

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return _result(y, (a,), backward, "l2_normalize")
