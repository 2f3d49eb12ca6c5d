"""Tensor container and the tape that records differentiable operations."""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


_local = threading.local()
_ids = itertools.count()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float array with an optional gradient accumulator.

    A tensor is a leaf unless it was produced by an operation recorded on a
    tape. Leaves with ``requires_grad`` receive ``grad`` after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_valid(self) -> None:
        """Raise ContractError if data holds NaN/Inf or grad has the wrong shape."""
        if not self.is_finite():
            raise ContractError(f"tensor {self.name or ''} contains non-finite values".replace("  ", " "))
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ContractError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("inputs", "output", "adjoint", "op")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, adjoint: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.adjoint = adjoint


class Tape:
    """Ordered record of executed operations, replayed in reverse by ``backward``.

    Use as a context manager; operations on tensors that require grad are
    recorded while the tape is active. A tape can be consumed only once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self.id = next(_ids)

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractError("tape already consumed; record a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


class no_grad:
    """Suspend recording inside the block, even if a tape is active."""

    def __enter__(self):
        _tape_stack().append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap ``out`` in a Tensor and register ``adjoint`` if any input needs grad.

    ``adjoint(grad_out)`` must return one gradient (or None) per input.
    """
    result = Tensor(out)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    if tape.consumed:
        raise ContractError(f"{op}: recording onto a consumed tape")
    result.requires_grad = True
    result._tape = tape
    tape.records.append(_Record(op, tuple(inputs), result, adjoint))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")
    if tape.consumed:
        raise ContractError("tape already consumed; repeated backward without re-recording")
    if not tape.records:
        raise ContractError("tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.adjoint(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(
                    f"adjoint of {rec.op} produced grad {gi.shape} for input {inp.shape}")
            if inp._tape is tape:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.consumed = True
    tape.records.clear()
