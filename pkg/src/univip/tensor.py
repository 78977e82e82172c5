"""A small reverse-mode autodiff tensor on top of numpy.

Every forward op records its parents and a closure that maps the output
gradient to input gradients. ``backward`` walks the graph once in reverse
topological order and accumulates into the ``grad`` of leaves that require it.
"""

from __future__ import annotations

import numpy as np

from . import kernels

EPS = 1e-12


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = _op
        self._parents = _parents
        self._backward = None

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self):
        backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b):
    a = as_tensor(a)
    b = _const_like(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    b = _const_like(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = _const_like(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        return (g * s,)

    return Tensor._make(a.data * s, (a,), bw, "scale")


def neg(a):
    return scale(a, -1.0)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), bw, "relu")


# max(x, 0) is the same map as relu; kept as a separate name where the clamp
# reads as a weight constraint rather than an activation.
clamp_min0 = relu


def elementwise(kind, a, b=None):
    """Dispatch by name: add, sub, mul, scale, relu, max0, neg."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in ("relu", "max0"):
        return relu(a)
    if kind == "neg":
        return neg(a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)

    def bw(g):
        return (g.T,)

    return Tensor._make(a.data.T, (a,), bw, "transpose")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of x (B, C, H, W) with w (F, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"channel mismatch: input {C}, kernel {Cw}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = kernels.conv_out_size(H, kh, stride, padding)
    ow = kernels.conv_out_size(W, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(B, oh, ow, F).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        dw = (g2.T @ cols).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(g2 @ wmat, x.shape, kh, kw, stride, padding)
        return dx, dw

    return Tensor._make(np.ascontiguousarray(out), (x, w), bw, "conv2d")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return Tensor._make(a.data.reshape(shape), (a,), bw, "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(data, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(a.data[idx]), (a,), bw, "getitem")


def stopgrad(a):
    """Same value, no gradient path back to ``a``."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), _op="stopgrad")


# ---------------------------------------------------------------------------
# normalization and cosine
# ---------------------------------------------------------------------------


def l2_normalize(v, eps=EPS):
    """Scale vectors along the last axis to unit length; zero-ish vectors are divided by eps."""
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v.data / denom
    big = norm > eps

    def bw(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return Tensor._make(y, (v,), bw, "l2_normalize")


def cosine(a, b, eps=EPS):
    """Cosine similarity along the last axis (a scalar for plain vectors)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine of vectors with lengths {a.shape[-1]} and {b.shape[-1]}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if np.any((na <= eps) & (nb <= eps)):
        raise NumericError("cosine of two zero-norm vectors (collapsed features)")
    return tsum(mul(l2_normalize(a, eps), l2_normalize(b, eps)), axis=-1)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check_finite(g, f"gradient of {node.op}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
