"""Dense tensors with reverse-mode gradients over a fixed op set.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 by default,
float64 for verification). Operations are pure functions: they return new
tensors and, when a :class:`GradTape` is active and an input requires
gradients, append a node with a hand-derived backward rule. Replaying the
tape in reverse yields gradients for every ``requires_grad`` leaf.

There is no general broadcasting machinery beyond what the ops here need
(elementwise ops broadcast numpy-style and un-broadcast in backward).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tsum",
    "tmean",
    "concat",
    "slice_axis",
    "gather",
    "take_along",
    "reshape",
    "transpose",
    "silu",
    "sigmoid",
    "tabs",
    "softmax",
    "rmsnorm",
    "swiglu_gated",
]

_FLOAT_KINDS = ("f",)


class Tensor:
    """Immutable-by-convention dense array with a ``requires_grad`` flag.

    ``data`` is always a C-contiguous float32/float64 numpy array. Ops never
    mutate inputs; ``assign`` exists solely so the optimizer can swap in
    updated parameter values between passes.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind not in _FLOAT_KINDS:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def assign(self, array: np.ndarray) -> None:
        """Replace the value in place. Only for optimizer updates."""
        arr = np.ascontiguousarray(array, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(values, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return Tensor(arr, requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Gradients:
    """Read-only view of the gradients produced by one backward pass."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def of(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of operations for one forward pass.

    Single-writer: one forward/backward pass owns one tape. ``backward``
    walks nodes in reverse recorded order and accumulates gradients in that
    fixed order, so repeated calls produce bit-identical results.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> Gradients:
        if seed is None:
            seed = np.ones_like(output.data)
        table: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.dtype)}
        for node in reversed(self._nodes):
            gout = table.get(id(node.out))
            if gout is None:
                continue
            gins = node.backward(gout)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = table.get(key)
                table[key] = g if prev is None else prev + g
        return Gradients(table)


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, tuple(inputs), backward))
    return out


# ---------------------------------------------------------------------------
# elementwise helpers

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; dA = dO.B^T, dB = A^T.dO.

    Supports stacked operands: leading dimensions must match exactly, or
    ``b`` may be a plain matrix applied to every stacked row block of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ValueError(f"matmul batch ranks disagree: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            n = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    out = Tensor(np.ascontiguousarray(a.data[idx]))

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _record(out, (a,), backward)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by an integer index list."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ValueError("gather expects a flat index list; use take_along for batched selection")
    axis = axis % a.ndim
    out = Tensor(np.ascontiguousarray(np.take(a.data, indices, axis=axis)))

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record(out, (a,), backward)


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Batched selection along one axis (numpy ``take_along_axis`` semantics).

    ``indices`` may broadcast against ``a`` in non-axis dimensions, but
    ``a`` itself must be full-size (no size-1 batch dims being expanded).
    """
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = Tensor(np.ascontiguousarray(np.take_along_axis(a.data, indices, axis=axis)))
    for ax in range(a.ndim):
        if ax != axis and a.shape[ax] != out.shape[ax]:
            raise ValueError("take_along cannot broadcast the source tensor")

    def backward(g):
        # scatter-add in a moved layout (axis last) so the flat target is a
        # plain contiguous array that writes through to the result
        moved_g = np.moveaxis(g, axis, -1)
        moved_idx = np.moveaxis(np.broadcast_to(indices, g.shape), axis, -1)
        depth = a.shape[axis]
        flat = np.zeros((int(np.prod(moved_g.shape[:-1], dtype=np.int64)), depth),
                        dtype=g.dtype)
        rows = np.repeat(np.arange(flat.shape[0]), moved_idx.shape[-1])
        np.add.at(flat, (rows, moved_idx.reshape(-1)), moved_g.reshape(-1))
        ga = np.moveaxis(flat.reshape(moved_g.shape[:-1] + (depth,)), -1, axis)
        return (np.ascontiguousarray(ga),)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """Swish activation x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)

    def backward(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))

    def backward(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max subtraction)."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def rmsnorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis; no learned affine."""
    x = a.data
    d = x.shape[-1]
    ms = (x * x).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = Tensor(x * r)

    def backward(g):
        dot = (g * x).sum(axis=-1, keepdims=True)
        return (g * r - x * (r ** 3) * (dot / d),)

    return _record(out, (a,), backward)


def swiglu_gated(x: Tensor, z_bias: Tensor, w_gate: Tensor, w_value: Tensor,
                 w_out: Tensor) -> Tensor:
    """SwiGLU with an additive bias inside the gate:

        (silu(x @ w_gate + z_bias) * (x @ w_value)) @ w_out

    ``z_bias`` broadcasts against the gate pre-activation; passing zeros
    recovers a plain SwiGLU.
    """
    gate = silu(add(matmul(x, w_gate), z_bias))
    value = matmul(x, w_value)
    return matmul(mul(gate, value), w_out)
