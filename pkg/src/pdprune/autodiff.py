"""Minimal dense tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array. Every op records its parents and a
closure mapping the output gradient to input gradients; :func:`backward`
walks the recorded graph in reverse topological order.

Broadcasting is deliberately limited: two tensor operands must have equal
shapes unless one of them is a 0-d scalar. Row-wise bias addition and
per-channel expansion are explicit ops (:func:`bias_add`,
:func:`expand_channels`).
"""
from __future__ import annotations

import contextlib
import numbers
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InputError, ShapeError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._released = False
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only the 0-d scalar case can reach here
    return np.asarray(grad.sum()).reshape(shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        a = _wrap(a)
        return Tensor._make(a.data + b, (a,), lambda g: (g,), "add_const")
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        return add(a, -b)
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        return scale(a, b)
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0).astype(a.dtype, copy=False), (a,),
                        lambda g: (g * pos,), "relu")


def square(a) -> Tensor:
    a = _wrap(a)
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, finite for every finite input.

    exp(-x) may overflow to inf for very negative x; 1 / inf is the exact
    limit 0, so the overflow is silenced rather than avoided.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    with np.errstate(over="ignore"):
        e = np.exp(-x)
    if e.ndim == 0:
        return np.asarray(1.0 / (1.0 + e), dtype=e.dtype)
    e += 1.0
    return np.reciprocal(e, out=e)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = stable_sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,), "exp")


# -- reductions and shape ------------------------------------------------------
def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    return Tensor._make(np.asarray(a.data.sum()), (a,),
                        lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.size
    return Tensor._make(np.asarray(a.data.mean()), (a,),
                        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum_channels(a) -> Tensor:
    """Sum over every axis except the first: shape (C, ...) -> (C,)."""
    a = _wrap(a)
    flat = a.data.reshape(a.shape[0], -1)
    return Tensor._make(flat.sum(axis=1), (a,),
                        lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * (a.data.ndim - 1)),
                                                   a.shape).copy(),), "sum_channels")


def expand_channels(v, shape) -> Tensor:
    """Broadcast a per-channel vector (C,) to ``shape`` whose first axis is C."""
    v = _wrap(v)
    shape = tuple(shape)
    if v.data.ndim != 1 or v.shape[0] != shape[0]:
        raise ShapeError(f"expand_channels: {v.shape} cannot fill {shape}")
    view = v.data.reshape((-1,) + (1,) * (len(shape) - 1))
    axes = tuple(range(1, len(shape)))
    return Tensor._make(np.broadcast_to(view, shape).copy(), (v,),
                        lambda g: (g.sum(axis=axes) if axes else g,), "expand_channels")


def bias_add(x, b) -> Tensor:
    """Add a per-feature bias: x (N, F) + b (F,), or x (N, C, H, W) + b (C,)."""
    x, b = _wrap(x), _wrap(b)
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match {x.shape}")
    view = b.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    axes = (0,) + tuple(range(2, x.data.ndim))
    return Tensor._make(x.data + view, (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


# -- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b),
                        lambda g: (g @ b.data.T if a.requires_grad else None,
                                   a.data.T @ g if b.requires_grad else None), "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def linear(x, weight) -> Tensor:
    """x (B, in) times weight (out, in) transposed."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    return Tensor._make(x.data @ weight.data.T, (x, weight),
                        lambda g: (g @ weight.data if x.requires_grad else None,
                                   g.T @ x.data if weight.requires_grad else None), "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed via im2col."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects N×C×H×W input and O×C×kH×kW kernel")
    if stride < 1 or padding < 0:
        raise InputError("stride must be positive and padding nonnegative")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0 or kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: non-positive output extent")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]          # N,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, dk
        dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


# -- loss ------------------------------------------------------------------------
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy expects (B, K) logits and B labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or
                        not np.issubdtype(labels.dtype, np.integer)):
        raise InputError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / labels.size),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "xent")


# -- backward pass ------------------------------------------------------------------
def _topo_order(root: Tensor) -> list:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that the graph never touches get a zero
    gradient. The graph is released afterwards; a second call raises
    :class:`StateError`.
    """
    if loss._released:
        raise StateError("backward already ran on this graph; rebuild the forward pass")
    if loss.size != 1:
        raise StateError("backward needs a scalar loss")
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        loss._released = True
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in _topo_order(loss):
        node._released = True
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
    loss._released = True
