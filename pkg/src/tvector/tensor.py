"""Dense arrays with define-by-run reverse-mode differentiation.

Operations act on the trailing axes of numpy arrays: matrix operations use
the last two axes and row-wise reductions the last one, so any leading axes
behave as a batch. Only operations executed while a :class:`Tape` is active
are recorded; outside a tape everything runs as plain numpy (inference).

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(x * x)
    ...     backward(loss)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite input to an operation that requires finite values."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


_node_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "node_id", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self.name = name
        self._tape = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the operations executed while it is active.

    Each entry holds the input tensors, the output tensor and a rule mapping
    the output gradient to one gradient per input. Inputs always precede the
    operation that consumes them, so a single reverse sweep suffices.
    """

    def __init__(self):
        self.ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: tuple[Tensor, ...], out: Tensor, rule: Callable) -> None:
        out._tape = self
        self.ops.append((inputs, out, rule))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        buffers = {loss.node_id: np.ones_like(loss.data)}
        leaves = {}
        for inputs, out, rule in reversed(self.ops):
            g = buffers.pop(out.node_id, None)
            if g is None:
                continue
            out._grad = g if out._grad is None else out._grad + g
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id in buffers:
                    buffers[inp.node_id] = buffers[inp.node_id] + gi
                else:
                    buffers[inp.node_id] = gi
                    leaves[inp.node_id] = inp
        for node_id, g in buffers.items():
            t = leaves.get(node_id)
            if t is not None:
                t._grad = g if t._grad is None else t._grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor that ``loss`` depends on.

    Gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if loss._tape is None:
        raise ContractError("loss is not on a recorded tape")
    loss._tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _wrap(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = active_tape()
    live = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = live
    out._grad = None
    out.node_id = next(_node_ids)
    out.name = None
    out._tape = None
    if live:
        tape.record(tuple(inputs), out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _wrap(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _wrap(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _wrap(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _wrap(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _wrap(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _wrap(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    return _wrap(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _wrap(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def stop_gradient(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    out.requires_grad = False
    out._grad = None
    out.node_id = next(_node_ids)
    out.name = None
    out._tape = None
    return out


# ---------------------------------------------------------------------------
# matrix operations on the last two axes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(a.data @ b.data, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {x.shape}")
    return _wrap(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _wrap(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _wrap(data, (x,), lambda g: (g.reshape(old),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the row axis (second to last), keeping the given order."""
    parts = [as_tensor(p) for p in parts]
    tails = {(p.shape[:-2], p.shape[-1]) for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"concat_rows: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def rule(g):
        return tuple(g[..., lo:hi, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _wrap(np.concatenate([p.data for p in parts], axis=-2), parts, rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len({p.shape[:-1] for p in parts}) != 1:
        raise DimensionError(f"concat_cols: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def rule(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _wrap(np.concatenate([p.data for p in parts], axis=-1), parts, rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    rows = x.shape[-2]
    if not 0 <= start < stop <= rows:
        raise DimensionError(f"slice_rows: [{start}, {stop}) out of range for {rows} rows")

    def rule(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _wrap(x.data[..., start:stop, :], (x,), rule)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return _wrap(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Per-column mean over the row axis, keeping it as a single row."""
    n = x.shape[-2]
    return _wrap(x.data.mean(axis=-2, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def std_rows(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Per-column population standard deviation with the variance floored at ``eps``."""
    n = x.shape[-2]
    centered = x.data - x.data.mean(axis=-2, keepdims=True)
    var = (centered ** 2).mean(axis=-2, keepdims=True)
    floored = var < eps
    std = np.sqrt(np.maximum(var, eps))

    def rule(g):
        return (np.where(floored, 0.0, g / (n * std)) * centered,)

    return _wrap(std, (x,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _wrap(s, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: width {n} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g):
        gx = None
        if x.requires_grad:
            d = g * gain.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _wrap(xhat * gain.data + bias.data, (x, gain, bias), rule)
