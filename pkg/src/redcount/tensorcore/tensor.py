"""Tensor values and the gradient tape that records operations on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    """A dense array that can take part in reverse-mode differentiation.

    ``data`` is a plain numpy array. ``grad`` is filled by :meth:`Tape.backward`
    for tensors with ``requires_grad`` set, and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered log of differentiable operations.

    Operations executed inside ``with Tape() as tape:`` are appended in
    execution order whenever at least one input requires a gradient.
    :meth:`backward` walks the log strictly in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.visited: list[str] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, retain_intermediate: bool = True) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        With ``retain_intermediate=False`` only leaf tensors (those not produced
        by a recorded op) keep their gradient and the log is consumed as it is
        walked, releasing saved activations early. Training uses this mode.
        """
        if loss.size != 1:
            raise ValueError("backward needs a scalar loss")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        loss.grad = np.ones_like(loss.data)
        self.visited = []
        for rec in self._walk(consume=not retain_intermediate):
            g = rec.output.grad
            self.visited.append(rec.op)
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                t.grad = gi if t.grad is None else t.grad + gi
            if not retain_intermediate and rec.output is not loss:
                rec.output.grad = None

    def _walk(self, consume: bool):
        if not consume:
            yield from reversed(self.records)
            return
        while self.records:
            yield self.records.pop()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and log it on the active tape if needed."""
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(_Record(op, out, tuple(inputs), backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
