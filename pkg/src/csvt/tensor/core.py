"""Tensor type, precision control and the reverse-mode tape."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


def set_precision(name: str) -> None:
    """Switch the engine-wide floating point type (``"f32"`` or ``"f64"``)."""
    global _dtype
    try:
        _dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_dtype() -> type:
    return _dtype


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or _dtype)
    return "f64" if dtype == np.float64 else "f32"


@contextmanager
def precision(name: str) -> Iterator[None]:
    old = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


class OpTrace(NamedTuple):
    name: str
    in_shapes: tuple
    out_shape: tuple


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Each record is ``(output, inputs, backward_fn)``. Records are appended in
    execution order, so inputs always precede the ops that consume them.
    """

    def __init__(self) -> None:
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Tape | None = None
        self.grad_enabled = True
        self.tracers: list[list[OpTrace]] = []


_state = _State()


def current_tape() -> Tape:
    tape = _state.tape
    if tape is None or tape.consumed:
        tape = _state.tape = Tape()
    return tape


def reset_tape() -> None:
    """Drop everything recorded on this thread's tape."""
    _state.tape = Tape()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (teacher forwards, evaluation)."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextmanager
def trace() -> Iterator[list[OpTrace]]:
    """Collect the name and shapes of every op executed inside the block."""
    records: list[OpTrace] = []
    _state.tracers.append(records)
    try:
        yield records
    finally:
        _state.tracers.remove(records)


class Tensor:
    """Dense float array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = np.array(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)


def record(
    name: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result, validate it, and append it to the tape if needed."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    for tracer in _state.tracers:
        tracer.append(OpTrace(name, tuple(t.shape for t in inputs), out.shape))
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._index = -1
    t._tape = None
    t.requires_grad = _state.grad_enabled and any(x.requires_grad for x in inputs)
    if t.requires_grad:
        tape = current_tape()
        for x in inputs:
            if x.requires_grad and x._tape is not None and x._tape is not tape:
                raise RuntimeError(
                    f"{name}: input belongs to a consumed tape; detach it or rerun the forward pass"
                )
        t._tape = tape
        t._index = len(tape.records)
        tape.records.append((t, tuple(inputs), backward_fn))
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``.

    Leaf grads accumulate across calls; the tape itself is consumed, so a
    second call on the same loss raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._tape is None:
        raise RuntimeError("loss is not on the tape (no input requires grad, or it was detached)")
    tape = loss._tape
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward; rerun the forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(inputs, fn(g)):
            if gx is None or not x.requires_grad:
                continue
            if x._tape is None:
                gx = np.array(gx, dtype=x.data.dtype)
                x.grad = gx if x.grad is None else x.grad + gx
            else:
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else gx
    tape.records.clear()
