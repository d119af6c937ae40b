"""Dense tensors with reverse-mode differentiation over an explicit tape.

A :class:`Tape` records every operation whose inputs need gradients while it
is active (``with tape: ...``).  :func:`backward` then walks the recorded
operations once, newest first, and accumulates ``dLoss/dInput`` into the
``grad`` buffer of every leaf tensor that has ``requires_grad=True``.

Gradients accumulate (``+=``); callers zero them between optimisation steps.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import InputError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors ("float32"/"float64")."""
    if mode not in _DTYPES:
        raise InputError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    previous = default_dtype()
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """An n-dimensional real array (rank 1 to 4) with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_derived", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise InputError(f"tensor rank must be 1..4, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # True for op outputs; their gradients live on the tape, not in .grad
        self._derived = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    A tape is activated with ``with tape:``; tapes nest per thread and the
    innermost active one receives new records.  A tape must not be shared by
    two threads at once.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op on the active tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._derived = True
        tape.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf on ``tape``.

    Leaves recorded on the tape but not reachable from ``loss`` get a zero
    gradient buffer.
    """
    if loss.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and not t._derived and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    if not loss._derived:
        loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g_out = pending.pop(id(rec.output), None)
        if g_out is None:
            continue
        grads = rec.backward(g_out)
        for inp, g in zip(rec.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._derived:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
            else:
                inp.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise InputError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant (no gradient w.r.t. the constant)."""
    f = a.data.dtype.type(factor)
    return record((a,), a.data * f, lambda g: (g * f,))


def reduce_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    out = np.array([a.data.sum(dtype=dtype)], dtype=dtype)
    return record((a,), out, lambda g: (np.full(shape, g[0], dtype=dtype),))


def sum_squares(a: Tensor) -> Tensor:
    """sum(a * a); fused to avoid materialising the product on the tape."""
    ad = a.data
    out = np.array([np.vdot(ad, ad)], dtype=ad.dtype)
    return record((a,), out, lambda g: (2 * g[0] * ad,))


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    if not terms:
        raise InputError("stack_sum needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total
