"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation creates a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  Creation order is
tracked with a global counter, so the ancestors of a loss, sorted by
decreasing id, form a valid reverse topological order.  The graph is rebuilt
on every forward pass (define-by-run).

Broadcasting is intentionally limited to scalar operands; the only other
shape-expanding operation is :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "clampmin",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take_columns",
    "softmax",
    "add_bias",
    "conv2d",
    "stop_gradient",
    "backward",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value was encountered where a finite one is required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation graph.

    Attributes:
        data: float64 ndarray with the forward value.
        requires_grad: whether adjoints are propagated to this node.
        grad: accumulated gradient for leaves (None until the first backward).
        op: name of the operation that produced this tensor ("leaf" for inputs).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    # Constant result if recording is off or nothing upstream needs gradients.
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(value, False, op=op)


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # operand was a 0-d scalar
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))  # NaN propagates


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log. Callers are expected to clamp inputs first (see :func:`clampmin`)."""
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value; clamp the input first")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clampmin(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor
    return _make(np.where(mask, a.data, floor), "clampmin", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))
    axis = axis % a.data.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), "sum", (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def take_columns(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select (and reorder) columns: ``out[:, k] = a[:, index[k]]``."""
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_columns expects a matrix, got shape {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _make(a.data[:, idx], "take_columns", (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and network layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: ``b`` has shape ``(x.shape[1],)``.

    For 4-d inputs (n, ch, h, w) the bias is per channel.
    """
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match input shape {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def bw(g):
        return g, g.sum(axis=reduce_axes)

    return _make(x.data + b.data.reshape(view), "add_bias", (x, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects (n, c), got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` (n, ci, h, w) with ``w`` (co, ci, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # im2col once, row per output pixel: (n*oh*ow, ci*kh*kw); reused by the backward pass
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, ci * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, oh, ow, ci, kh, kw)
        dxp = np.zeros((n, ci, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, gw

    return _make(np.ascontiguousarray(out), "conv2d", (x, w), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Same forward value; no adjoint flows back through this edge."""
    return Tensor(x.data, False, op="stop_gradient")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Repeated calls accumulate; call ``zero_grad`` on the leaves to reset.
    Intermediate adjoints are not retained.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adjoint: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for node in _ancestors(loss):
        g = adjoint.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adjoint.get(parent._id)
            adjoint[parent._id] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
