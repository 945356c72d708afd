"""Minimal reverse-mode autodiff over dense numpy arrays.

Graphs are taped dynamically: every op applied to a tensor that requires a
gradient records its parents and a closure computing the vector-Jacobian
product. ``backward`` walks the tape once in reverse topological order.

Shapes are never broadcast implicitly. Elementwise ops accept a tensor of the
same shape or a plain Python scalar; anything else has to be aligned with an
explicit ``broadcast_to`` / ``reshape`` first.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when op inputs do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised by the NaN/Inf guard."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _nan_guard() -> bool:
    return getattr(_state, "nan_guard", False)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def nan_guard(enabled: bool = True):
    """Reject non-finite op inputs in the current thread while active."""
    prev = _nan_guard()
    _state.nan_guard = enabled
    try:
        yield
    finally:
        _state.nan_guard = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{kind}: non-finite input")


def _make(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _nan_guard():
        _check_finite(kind, *(p.data for p in parents))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = kind
    out.name = None
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("add", a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("sub", a.data - c, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make("gelu", out, (a,), bw)


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _make("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _make("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: shape mismatch {a.shape} vs {mask.shape}")
    keep = ~mask
    return _make("masked_fill", np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` either (k, n) or
    (..., k, n) with leading dims identical to ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
        out = ad @ bd

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", out, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; swaps the last two when ``axes`` is None."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need >= 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot map {a.shape} to {shape}")
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; size-1 and missing leading axes are expanded."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (a,), bw)


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: shape mismatch {tensors[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make("concat_last_axis", np.concatenate([t.data for t in tensors], axis=-1), tensors, bw)


def slice_last_axis(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_last_axis: bounds [{start}, {stop}) outside extent {a.shape}")
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _make("slice_last_axis", np.ascontiguousarray(a.data[..., start:stop]), (a,), bw)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    src = table.shape

    def bw(g):
        gt = np.zeros(src, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, src[1]))
        return (gt,)

    return _make("embedding_lookup", table.data[idx], (table,), bw)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max-pool along one axis (the axis is removed)."""
    axis = axis % a.ndim
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)
    src = a.shape

    def bw(g):
        ga = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(ga, arg, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make("max_axis", out, (a,), bw)


# --------------------------------------------------------------------------
# normalisation


def softmax_last_axis(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax_last_axis", s, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; affine terms are applied by the caller."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), bw)


# --------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _make("sum_all", np.asarray(a.data.sum()), (a,), lambda g: (np.full(src, g, dtype=a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    return _make("mean_all", np.asarray(a.data.mean()), (a,), lambda g: (np.full(src, g / n, dtype=a.data.dtype),))


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences; ``b`` may be a constant array."""
    b = _as_tensor(b)
    _same_shape("mse", a, b)
    d = a.data - b.data
    n = d.size
    return _make("mse", np.asarray((d * d).mean()), (a, b), lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


def abs_mean(a: Tensor) -> Tensor:
    x = a.data
    n = x.size
    return _make("abs_mean", np.asarray(np.abs(x).mean()), (a,), lambda g: (g * np.sign(x) / n,))


OP_KINDS = (
    "add", "sub", "mul", "scalar_mul", "matmul", "transpose", "reshape",
    "concat_last_axis", "slice_last_axis", "softmax_last_axis", "layer_norm",
    "relu", "gelu", "sin", "cos", "mean_all", "sum_all", "mse", "abs_mean",
    "embedding_lookup", "masked_fill", "broadcast_to", "max_axis",
)


# --------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; intermediate ``.grad`` buffers
    hold the gradient of the most recent pass only.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None or node.grad.shape != node.shape:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
