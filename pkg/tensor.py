"""
tensor.py — Dense tensors with tape-based reverse-mode differentiation.

Ops record themselves on the innermost active ``Tape`` of the calling thread,
so every client task owns its own recording.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from config import DEBUG_FINITE, DEFAULT_DTYPE
from errors import DimensionError, NonFiniteError, StaleTapeError, TapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype: type = _DTYPES[DEFAULT_DTYPE]
_debug_finite: bool = DEBUG_FINITE
_local = threading.local()


# ── Global switches ─────────────────────────────────────────────────────────

def set_default_dtype(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _dtype


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    """Temporarily switch every new tensor to ``name`` (oracle comparisons use float64)."""
    previous = np.dtype(_dtype).name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug_finite(enabled: bool) -> None:
    global _debug_finite
    _debug_finite = enabled


# ── Tape ────────────────────────────────────────────────────────────────────

class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> None:
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops, replayed backwards exactly once."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise StaleTapeError("cannot record on a tape that has already been replayed")
        self._records.append(_Record(output, inputs, backward))
        output._tape = self
        output._is_leaf = False

    def backward(self, loss: "Tensor") -> None:
        if self._consumed:
            raise StaleTapeError("backward() already ran on this tape; run the forward pass again")
        if not self._records:
            raise TapeError("tape is empty; nothing to differentiate")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._records):
            for inp in rec.inputs:
                if inp._is_leaf and inp.requires_grad:
                    leaves[id(inp)] = inp
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=inp.data.dtype)

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self._consumed = True


def active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording, even inside an active tape."""
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# ── Tensor ──────────────────────────────────────────────────────────────────

class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.array(data, dtype=_dtype, copy=True, ndmin=0)
        self.grad: np.ndarray | None = None
        self.requires_grad: bool = requires_grad
        self._tape: Tape | None = None
        self._is_leaf: bool = True

    # ── Introspection ───────────────────────────────────────────────────

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded op")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ── Arithmetic ──────────────────────────────────────────────────────

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return make_result(
            self.data + other.data, (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return make_result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return make_result(
            self.data - other.data, (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_result(
            a * b, (self, other),
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_result(
            a / b, (self, other),
            lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return make_result(
            a ** exponent, (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, as_tensor(other))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return make_result(self.data[index], (self,), backward)

    # ── Reductions and shape ────────────────────────────────────────────

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return make_result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return make_result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make_result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return make_result(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return make_result(out, (self,), lambda g: (g * 0.5 / out,))


# ── Construction helpers ────────────────────────────────────────────────────

def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result and record it on the active tape when gradients are needed."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_dtype)
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._tape = None
    out._is_leaf = True
    if _debug_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced (shape {out.shape})")
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── Multi-input ops ─────────────────────────────────────────────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return make_result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)
