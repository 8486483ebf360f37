"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradient tracking is on,
remembers the op that produced it together with a closure mapping the
output gradient to gradients of its inputs. :meth:`Tensor.backward` walks
the graph in reverse topological order and accumulates ``.grad`` on leaf
tensors created with ``requires_grad=True``.

Storage defaults to float32. Gradient verification switches the whole
engine to float64 with :func:`set_default_dtype` or the :func:`precision`
context manager.

Image-like tensors use channel-last layout (N, H, W, C) throughout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "branch_recorder",
]

_DTYPE = np.float32
_GRAD_ENABLED = True
_BRANCH_LOG: list | None = None


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        extents = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {extents}")


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default storage dtype."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def branch_recorder():
    """Record which side of every non-smooth point each op landed on.

    Piecewise ops (relu, clip, max, argmax seeding) append a compact
    signature of their branch decisions to the yielded list. Finite
    difference checks compare signatures between perturbed evaluations
    to reject samples that straddle a kink.
    """
    global _BRANCH_LOG
    previous = _BRANCH_LOG
    log: list = []
    _BRANCH_LOG = log
    try:
        yield log
    finally:
        _BRANCH_LOG = previous


def record_branch(kind: str, decision: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        decision = np.asarray(decision)
        if decision.dtype == bool:
            decision = np.packbits(decision.ravel())
        _BRANCH_LOG.append((kind, decision.tobytes()))


def _as_array(value, dtype=None) -> np.ndarray:
    dtype = dtype or _DTYPE
    if isinstance(value, np.ndarray) and value.dtype == dtype:
        return value
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, a, b) from None


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = ""

    # graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # backward -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = _as_array(grad, self.data.dtype)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator overloads -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # method aliases
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# elementwise binary ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape("maximum", a.shape, b.shape)
    pick_a = a.data >= b.data
    record_branch("maximum", pick_a)

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                _unbroadcast(np.where(pick_a, 0, g), b.shape))

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


# elementwise unary -----------------------------------------------------


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    """Square root with gradient defined as 0 at exactly 0."""
    a = _lift(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._result(out, (a,), backward, "sqrt")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    ad = a.data
    out = ad ** exponent
    if exponent == 2:
        return Tensor._result(out, (a,), lambda g: (g * 2 * ad,), "square")
    return Tensor._result(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def relu(a) -> Tensor:
    a = _lift(a)
    on = a.data > 0
    record_branch("relu", on)
    return Tensor._result(np.maximum(a.data, 0), (a,),
                          lambda g: (g * on,), "relu")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the range."""
    a = _lift(a)
    inside = (a.data > lo) & (a.data < hi)
    record_branch("clip", inside)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def stop_gradient(a) -> Tensor:
    return _lift(a).detach()


# reductions ------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def max_(a, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; returns values and the (first) argmax indices."""
    a = _lift(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    record_branch("max", idx)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return Tensor._result(vals, (a,), backward, "max"), idx


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axis = axis % a.ndim
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    if not keepdims:
        out = out.squeeze(axis)
    return Tensor._result(out, (a,), backward, "logsumexp")


def softmax(a, axis: int) -> Tensor:
    a = _lift(a)
    axis = axis % a.ndim
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int) -> Tensor:
    a = _lift(a)
    axis = axis % a.ndim
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


# shape manipulation ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    old = a.shape
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,),
                          lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    old = a.shape
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def expand_dims(a, axis) -> Tensor:
    a = _lift(a)
    old = a.shape
    return Tensor._result(np.expand_dims(a.data, axis), (a,),
                          lambda g: (g.reshape(old),), "expand_dims")


def _has_advanced(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in index)


def getitem(a, index) -> Tensor:
    a = _lift(a)
    if isinstance(index, Tensor):
        index = index.data
    out = np.asarray(a.data[index])
    shape, dtype = a.shape, a.data.dtype
    advanced = _has_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._result(out, (a,), backward, "getitem")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concatenate", *(t.shape for t in ts))
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return Tensor._result(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", *(t.shape for t in ts))
    axis = axis % (ts[0].ndim + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._result(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def where(condition, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(condition.data if isinstance(condition, Tensor) else condition, dtype=bool)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0), a.shape),
                _unbroadcast(np.where(cond, 0, g), b.shape))

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), backward, "where")


# linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (..., in) and weight (in, out)."""
    x, weight = _lift(x), _lift(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    wd = weight.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "linear")


# convolution -----------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of a padded NHWC array as (N*out_h*out_w, k*k*C) rows."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H', W', C, k, k)
    win = win[:, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * out_h * out_w, k * k * c)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch rows into a padded array."""
    n, _, _, c = padded_shape
    cols = cols.reshape(n, out_h, out_w, k, k, c)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    hs = (out_h - 1) * stride + 1
    ws = (out_w - 1) * stride + 1
    for dy in range(k):
        for dx in range(k):
            xp[:, dy : dy + hs : stride, dx : dx + ws : stride, :] += cols[:, :, :, dy, dx, :]
    return xp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation on NHWC input with HWIO weights and zero padding.

    ``padding`` defaults to ``k // 2`` ("same" for stride 1, halving for stride 2).
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != weight.shape[1] or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k, cin, cout = weight.shape[0], weight.shape[2], weight.shape[3]
    pad = k // 2 if padding is None else padding
    n, h, w, _ = x.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        bias = _lift(bias)
        out += bias.data
    out = out.reshape(n, out_h, out_w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat.T, xp.shape, k, stride, out_h, out_w)
            gx = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int | None = None,
                     output_padding: int | None = None) -> Tensor:
    """Transposed 2-D convolution (adjoint of :func:`conv2d`) on NHWC input.

    Weight layout is (k, k, C_out, C_in), i.e. that of the forward conv this
    op is the adjoint of. Defaults choose padding so the output is exactly
    ``stride`` times the input size: out = (in - 1) * s - 2p + k + output_padding.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != weight.shape[1] or weight.shape[3] != x.shape[3]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    k, cout, cin = weight.shape[0], weight.shape[2], weight.shape[3]
    pad = k // 2 if padding is None else padding
    if output_padding is None:
        output_padding = stride + 2 * pad - k
    if not 0 <= output_padding < stride and not (stride == 1 and output_padding == 0):
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    n, h, w, _ = x.shape
    out_h = (h - 1) * stride - 2 * pad + k + output_padding
    out_w = (w - 1) * stride - 2 * pad + k + output_padding
    padded = (n, out_h + 2 * pad, out_w + 2 * pad, cout)
    wmat = weight.data.reshape(k * k * cout, cin)
    x2 = x.data.reshape(-1, cin)
    full = _col2im(x2 @ wmat.T, padded, k, stride, h, w)
    out = full[:, pad : pad + out_h, pad : pad + out_w, :]
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = _lift(bias)
        out += bias.data

    def backward(g):
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else g
        cols = _im2col(gp, k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (cols @ wmat).reshape(x.shape)
        if weight.requires_grad:
            gw = (cols.T @ x2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv_transpose2d")


# normalisation ---------------------------------------------------------


def _rowsum(a: np.ndarray) -> np.ndarray:
    """Sum (N, M, C) over the middle axis via BLAS; much faster than ``sum(axis=1)``."""
    ones = np.ones((1, a.shape[1]), dtype=a.dtype)
    return np.matmul(ones, a)[:, 0, :]


def group_norm(x, groups: int, scale=None, shift=None, eps: float = 1e-5) -> Tensor:
    """Group normalisation over NHWC (or N..C) input with per-channel affine."""
    x = _lift(x)
    affine = scale is not None
    if affine:
        scale, shift = _lift(scale), _lift(shift)
    c = x.shape[-1]
    if c % groups:
        raise ShapeError("group_norm", x.shape, (groups,))
    n = x.shape[0]
    cg = c // groups
    x3 = x.data.reshape(n, -1, c)
    count = x3.shape[1] * cg

    def per_channel(group_vals):
        return np.repeat(group_vals, cg, axis=1)[:, None, :]

    mu = per_channel(_rowsum(x3).reshape(n, groups, cg).sum(-1) / count)
    xc = x3 - mu
    var = np.einsum("nmc,nmc->nc", xc, xc).reshape(n, groups, cg).sum(-1) / count
    inv = per_channel(1.0 / np.sqrt(var + eps))
    xhat = xc * inv
    out = xhat * scale.data + shift.data if affine else xhat

    def backward(g):
        g3 = g.reshape(n, -1, c)
        s_g = _rowsum(g3)
        s_gx = np.einsum("nmc,nmc->nc", g3, xhat)
        gs = gb = None
        if affine:
            gs = s_gx.sum(axis=0)
            gb = s_g.sum(axis=0)
            g3 = g3 * scale.data
            s_g = s_g * scale.data
            s_gx = s_gx * scale.data
        mean_g = per_channel(s_g.reshape(n, groups, cg).sum(-1) / count)
        mean_gx = per_channel(s_gx.reshape(n, groups, cg).sum(-1) / count)
        gx = (inv * (g3 - mean_g - xhat * mean_gx)).reshape(x.shape)
        return (gx, gs, gb) if affine else (gx,)

    parents = (x, scale, shift) if affine else (x,)
    return Tensor._result(out.reshape(x.shape), parents, backward, "group_norm")


def layer_norm(x, scale=None, shift=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with optional per-feature affine."""
    x = _lift(x)
    affine = scale is not None
    if affine:
        scale, shift = _lift(scale), _lift(shift)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data if affine else xhat

    def backward(g):
        gs = gb = None
        if affine:
            g2 = g.reshape(-1, d)
            gs = (g2 * xhat.reshape(-1, d)).sum(axis=0)
            gb = g2.sum(axis=0)
            g = g * scale.data
        mean_g = g.mean(axis=-1, keepdims=True)
        mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (g - mean_g - xhat * mean_gx)
        return (gx, gs, gb) if affine else (gx,)

    parents = (x, scale, shift) if affine else (x,)
    return Tensor._result(out, parents, backward, "layer_norm")


def iter_graph(root: Tensor) -> Iterable[Tensor]:
    """Yield every tensor reachable from ``root`` through tracked parents."""
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node._parents)
