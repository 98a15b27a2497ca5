"""A small reverse-mode autodiff engine over dense NCHW numpy arrays.

Each op computes its output eagerly and records a closure over whatever
it needs for the backward pass. Backward functions live in ``ADJOINTS``
so the gradient checker can swap one out (see :func:`corrupt_adjoint`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

ADJOINTS: dict[str, Callable] = {}

_check_finite = False


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def set_nan_check(enabled: bool) -> None:
    """Raise NumericError as soon as any op produces a non-finite value."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _op: str | None = None, _ctx=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._op = _op
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._op is None or node.grad is None:
                continue
            grads = ADJOINTS[node._op](node.grad, node._ctx)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(f"{node._op} adjoint returned {g.shape} for input {parent.data.shape}")
                parent.grad = g if parent.grad is None else parent.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, op: str, parents: Sequence[Tensor], ctx) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _op=op if needs else None, _ctx=ctx if needs else None)


def adjoint(name: str):
    def register(fn):
        ADJOINTS[name] = fn
        return fn
    return register


@contextlib.contextmanager
def corrupt_adjoint(name: str, factor: float = 1.1):
    """Temporarily scale the gradient an op hands to its first input (mutation testing)."""
    original = ADJOINTS[name]

    def broken(g, ctx):
        grads = list(original(g, ctx))
        if grads[0] is not None:
            grads[0] = grads[0] * factor
        return tuple(grads)

    ADJOINTS[name] = broken
    try:
        yield
    finally:
        ADJOINTS[name] = original


# --- convolution -----------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of the padded input as a (C*k*k, N*Ho*Wo) matrix."""
    n, c = xp.shape[:2]
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xc[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Square-kernel convolution with 'same' zero padding (k // 2) and the given stride."""
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci} ({w.shape})")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)
    ctx = (cols, wm, x.shape, w.shape, k, stride, pad, ho, wo, b is not None)
    return _make(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), "conv2d", parents, ctx)


@adjoint("conv2d")
def _conv2d_backward(g, ctx):
    cols, wm, xshape, wshape, k, stride, pad, ho, wo, has_b = ctx
    n, c, h, wd = xshape
    o = wshape[0]
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
    gw = (g2 @ cols.T).reshape(wshape)
    dcols = (wm.T @ g2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, ky, kx]
    gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
    if has_b:
        return gx, gw, g2.sum(axis=1)
    return gx, gw


# --- resampling --------------------------------------------------------------

def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, "upsample2", (x,), x.shape)


@adjoint("upsample2")
def _upsample2_backward(g, shape):
    n, c, h, w = shape
    return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


# --- pointwise -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), mask)


@adjoint("relu")
def _relu_backward(g, mask):
    return (np.where(mask, g, 0).astype(g.dtype),)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype)
    return _make(out, "softplus", (x,), x.data)


@adjoint("softplus")
def _softplus_backward(g, xdata):
    sig = np.exp(-np.logaddexp(0, -xdata))
    return ((g * sig).astype(g.dtype),)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), None)


@adjoint("add")
def _add_backward(g, _):
    return g, g


def scale(x: Tensor, k: float) -> Tensor:
    return _make(x.data * x.dtype.type(k), "scale", (x,), k)


@adjoint("scale")
def _scale_backward(g, k):
    return (g * g.dtype.type(k),)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    xs = list(xs)
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat: {t.shape} incompatible with {base}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=1), "concat", xs, splits)


@adjoint("concat")
def _concat_backward(g, splits):
    return tuple(np.split(g, splits, axis=1))


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice a channel range [start, stop)."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice {start}:{stop} out of range for {x.shape}")
    return _make(x.data[:, start:stop].copy(), "channels", (x,), (x.shape, start, stop))


@adjoint("channels")
def _channels_backward(g, ctx):
    shape, start, stop = ctx
    out = np.zeros(shape, dtype=g.dtype)
    out[:, start:stop] = g
    return (out,)


def simplex_head(x: Tensor, eps: float = 1e-3) -> Tensor:
    """Map each pixel to the unit simplex: (|x| + eps) / sum_c (|x| + eps).

    The derivative of |x| at exactly 0 is taken as +1 so a zero-initialised
    producer still receives gradient.
    """
    a = np.abs(x.data) + x.dtype.type(eps)
    s = a.sum(axis=1, keepdims=True)
    y = a / s
    sign = np.where(x.data >= 0, 1, -1).astype(x.dtype)
    return _make(y, "simplex_head", (x,), (y, s, sign))


@adjoint("simplex_head")
def _simplex_head_backward(g, ctx):
    y, s, sign = ctx
    da = (g - (g * y).sum(axis=1, keepdims=True)) / s
    return (da * sign,)


# --- externally differentiated scalars -------------------------------------------

def external(inputs: Sequence[Tensor], value: float, grads: Sequence[np.ndarray]) -> Tensor:
    """Scalar node whose gradients w.r.t. ``inputs`` were computed outside the graph."""
    dtype = inputs[0].dtype
    gs = [np.asarray(gi, dtype=t.dtype).reshape(t.shape) for t, gi in zip(inputs, grads)]
    return _make(np.asarray(value, dtype=dtype), "external", inputs, gs)


@adjoint("external")
def _external_backward(g, gs):
    return tuple(g * gi for gi in gs)


def total(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


LAYER_OPS = ("conv2d", "upsample2", "relu", "softplus", "add", "scale", "concat", "channels", "simplex_head")
