"""Tensor value type, the gradient tape and reverse-mode accumulation."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class EngineError(RuntimeError):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError, ValueError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class TapeError(EngineError):
    pass


class Tensor:
    """Dense float32/float64 array with optional gradient tracking.

    Activations are 4-D ``(N, C, H, W)``; parameter vectors (bias, gamma,
    beta) are 1-D and the loss is 0-D. ``version`` is bumped by every
    in-place update so that stale tapes can be detected.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "version", "_from_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.version = 0
        self._from_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def assign(self, value: np.ndarray) -> None:
        """Replace contents in place (shape-preserving) and bump the version."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign shape {value.shape} != {self.data.shape}")
        self.data[...] = value
        self.version += 1

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value if dtype is None or value.dtype == dtype else value.astype(dtype)
    return Tensor(value, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("op", "output", "inputs", "backward", "versions")

    def __init__(self, op, output, inputs, backward, versions):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.versions = versions


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable primitive calls made while it is active.

    Use as a context manager::

        with Tape() as tape:
            loss = some_forward(...)
        grads = tape.backward(loss, wrt=params)
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor | None], backward: BackwardFn) -> None:
        output.requires_grad = True
        output._from_tape = True
        versions = tuple(None if t is None else t.version for t in inputs)
        self.records.append(_Record(op, output, tuple(inputs), backward, versions))

    def backward(self, loss: Tensor, loss_grad=1.0, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(self, loss, loss_grad, wrt)


def needs_grad(*tensors: Tensor | None) -> Tape | None:
    """Return the active tape if any input participates in differentiation."""
    tape = active_tape()
    if tape is None:
        return None
    if any(t is not None and t.requires_grad for t in tensors):
        return tape
    return None


def backward(tape: Tape, loss: Tensor, loss_grad=1.0, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation over ``tape``.

    Gradients of tensors consumed by several records are summed. Every leaf
    tensor that requires grad receives ``.grad``; tensors listed in ``wrt``
    that the loss does not depend on get an all-zero gradient.
    """
    for rec in tape.records:
        for t, v in zip(rec.inputs, rec.versions):
            if t is not None and t.version != v:
                raise TapeError(
                    f"tape reuse after parameter mutation: input of {rec.op!r} "
                    f"({t.name or 'unnamed'}) changed since it was recorded"
                )
    grads: dict[int, np.ndarray] = {id(loss): np.broadcast_to(np.asarray(loss_grad, dtype=loss.dtype), loss.shape).copy()}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if t is None or gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not t._from_tape:
                leaves[key] = t
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = g
        out[t] = g
    if wrt is not None:
        for t in wrt:
            if t not in out:
                t.grad = np.zeros_like(t.data)
                out[t] = t.grad
    return out
