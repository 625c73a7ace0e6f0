"""Differentiable primitives.

Each primitive computes its forward value with numpy and records a backward rule
returning one gradient per input (``None`` for inputs that need none).

Broadcasting is deliberately narrow: binary elementwise ops accept equal shapes,
a python scalar, or a right operand whose shape is a suffix of the left operand's
shape (bias-add). Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result, shape_error

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _suffix_broadcast(op: str, a: Tensor, b: Tensor) -> int:
    """Return the number of leading axes b is broadcast over (0 when equal)."""
    if a.shape == b.shape:
        return 0
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.ndim - b.ndim
    raise shape_error(op, a.shape, b.shape)


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make_result(a.data + float(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    lead = _suffix_broadcast("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, _reduce_lead(g, lead)))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    lead = _suffix_broadcast("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -_reduce_lead(g, lead)))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = as_tensor(a), float(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    lead = _suffix_broadcast("mul", a, b)

    def bw(g):
        return g * b.data, _reduce_lead(g * a.data, lead)

    return make_result(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise shape_error("minimum", a.shape, b.shape)
    pick_a = a.data <= b.data

    def bw(g):
        return np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)

    return make_result(np.where(pick_a, a.data, b.data), (a, b), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise shape_error("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), bw)


# ------------------------------------------------------------- nonlinearities

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return make_result(y, (a,), bw)


# ---------------------------------------------------------------- reductions

def _axis_tuple(ndim: int, axis) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _axis_tuple(a.ndim, axis)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return make_result(np.sum(a.data, axis=axes), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(a.ndim, axis)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis), 1.0 / count)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    y = (m + np.log(total)).squeeze(ax)
    soft = shifted / total
    return make_result(y, (a,), lambda g: (np.expand_dims(g, ax) * soft,))


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    n = np.sqrt(np.sum(a.data * a.data, axis=ax))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g / safe * (n > 0), ax) * a.data,)

    return make_result(n, (a,), bw)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along ``axis``.

    Pairs where either vector has norm below ``eps`` score 0 with zero gradient.
    """
    if a.shape != b.shape:
        raise shape_error("cosine_similarity", a.shape, b.shape)
    ax = axis % a.ndim
    x, y = a.data, b.data
    nx = np.sqrt(np.sum(x * x, axis=ax, keepdims=True))
    ny = np.sqrt(np.sum(y * y, axis=ax, keepdims=True))
    valid = (nx >= eps) & (ny >= eps)
    nx_s = np.where(valid, nx, 1.0)
    ny_s = np.where(valid, ny, 1.0)
    dot = np.sum(x * y, axis=ax, keepdims=True)
    cos = np.where(valid, dot / (nx_s * ny_s), 0.0)

    def bw(g):
        ge = np.expand_dims(g, ax) * valid
        ga = ge * (y / (nx_s * ny_s) - cos * x / (nx_s * nx_s))
        gb = ge * (x / (nx_s * ny_s) - cos * y / (ny_s * ny_s))
        return ga, gb

    return make_result(cos.squeeze(ax), (a, b), bw)


def squared_error(pred: Tensor, target) -> Tensor:
    """Mean of elementwise squared differences (target may be a constant array)."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise shape_error("squared_error", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = 2.0 * diff / n * g
        return d, -d

    return make_result(np.asarray(np.mean(diff * diff)), (pred, target), bw)


# ------------------------------------------------------------ shape plumbing

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", src, shape) from None
    return make_result(y, (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        out = np.zeros(src)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make_result(np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise shape_error("concat", ref.shape, t.shape)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise shape_error("stack", tensors[0].shape, t.shape)
    ax = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=ax), tensors, bw)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    y = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return make_result(y, (a,), lambda g: (g.sum(axis=0),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ------------------------------------------------------------------ conv2d

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Valid-padding 2-D cross-correlation.

    x: (N, C, H, W), w: (O, C, kh, kw), b: (O,) -> (N, O, Ho, Wo)
    with Ho = (H - kh) // stride + 1.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise shape_error("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise shape_error("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (o,):
        raise shape_error("conv2d(bias)", w.shape, b.shape)
    s = int(stride)
    ho = (h - kh) // s + 1
    wo = (wd - kw) // s + 1
    # im2col in channels-last layout: columns ordered (i, j, c)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
    wm = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = (cols @ wm).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (cols.T @ gt).reshape(kh, kw, c, o).transpose(3, 2, 0, 1) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gt @ wm.T).reshape(n, ho, wo, kh * kw, c)
            gxt = np.zeros((n, h, wd, c))
            for k, (i, j) in enumerate(offsets):
                gxt[:, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s, :] += gcols[:, :, :, k, :]
            gx = gxt.transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, np.ones(len(gt)) @ gt

    return make_result(out, inputs, bw)
