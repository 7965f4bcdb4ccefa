"""Dense float64 tensors with a tape-based reverse-mode autograd.

Every differentiable op records a node on the calling thread's active tape
when at least one of its inputs requires a gradient.  ``backward`` replays
that tape in reverse order and then clears it.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class NonFiniteError(FloatingPointError):
    pass


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def shape4(self) -> Shape4:
        if self.values.ndim != 4:
            raise DimensionError(f"expected a 4-D tensor, got shape {self.shape}")
        return Shape4(*self.values.shape)

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Node:
    inputs: Sequence[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str = ""


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.debug = False


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def using_tape(tape: Tape) -> Iterator[Tape]:
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Check every op output (and every gradient) for NaN/Inf."""
    _state.debug = enabled


def make_output(values: np.ndarray, inputs: Sequence[Tensor], backward, name: str = "") -> Tensor:
    """Wrap ``values`` as an op output and record it on the tape if needed."""
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if _state.debug and not np.all(np.isfinite(out.values)):
        raise NonFiniteError(f"non-finite values produced by {name or 'op'}")
    if needs:
        _state.tape.record(Node(tuple(inputs), out, backward, name))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The tape is cleared
    afterwards whether or not every node was reachable.
    """
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    owners: dict[int, Tensor] = {id(loss): loss}
    try:
        for node in reversed(tape.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            _deposit(node.output, gout)
            for inp, g in zip(node.inputs, node.backward(gout)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    owners[key] = inp
        # leaves (never an op output) still hold their gradients here
        for key, g in grads.items():
            _deposit(owners[key], g)
    finally:
        tape.clear()


def _deposit(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64).reshape(t.values.shape)
    if _state.debug and not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    t.grad = g.copy() if t.grad is None else t.grad + g
