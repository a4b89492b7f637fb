"""Reverse-mode differentiation over a linear record of executed primitives.

Every primitive that supports gradients appends one record to an
:class:`OpTape` holding strong references to its input/output tensors and a
vector-Jacobian-product closure. Replaying the records in reverse order
propagates the loss gradient to every watched parameter exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import TapeError
from .tensor import Tensor

__all__ = ["OpTape", "backward"]


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


class OpTape:
    """Ordered record of executed primitives.

    A single tape must be driven by one thread; independent tapes may run
    concurrently. A tape can be replayed backward once and must be `reset()`
    (or replaced) before recording a new forward pass.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: dict[str, Tensor] = {}
        self._replayed = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self._records]

    def watch(self, name: str, tensor: Tensor) -> None:
        """Register a named parameter whose gradient backward() must report."""
        if name in self._watched and self._watched[name] is not tensor:
            raise TapeError(f"parameter name {name!r} already watched with a different tensor")
        self._watched[name] = tensor

    def watched(self) -> dict[str, Tensor]:
        return dict(self._watched)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        if self._replayed:
            raise TapeError("tape already replayed; reset() before recording again")
        self._records.append(_Record(op, tuple(inputs), output, vjp))

    def reset(self) -> None:
        self._records.clear()
        self._watched.clear()
        self._replayed = False


def backward(tape: OpTape, loss_grad: float = 1.0) -> dict[str, Tensor]:
    """Propagate a scalar seed through the tape in reverse.

    Returns the gradient of the (scalar) taped computation with respect to
    every watched parameter; a parameter used several times accumulates the
    sum of its contributions, and one the loss never touched gets zeros.
    """
    if tape._replayed:
        raise TapeError("tape already replayed once; reset() and rerun the forward pass")
    if not tape._records:
        raise TapeError("tape is empty; nothing was recorded")
    tail = tape._records[-1].output
    if tail.size != 1:
        raise TapeError(f"tape must end in a scalar, last output has shape {tail.shape}")
    tape._replayed = True

    grads: dict[int, np.ndarray] = {
        id(tail): np.full(tail.shape, float(loss_grad), dtype=tail.dtype)
    }
    for rec in reversed(tape._records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        contribs = rec.vjp(g)
        if len(contribs) != len(rec.inputs):
            raise TapeError(f"op {rec.op!r} returned {len(contribs)} gradients "
                            f"for {len(rec.inputs)} inputs")
        for inp, gin in zip(rec.inputs, contribs):
            if gin is None:
                continue
            if gin.shape != inp.shape:
                raise TapeError(f"op {rec.op!r} produced gradient shape {gin.shape} "
                                f"for input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin

    out: dict[str, Tensor] = {}
    for name, t in tape._watched.items():
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        out[name] = Tensor(np.asarray(g, dtype=t.dtype))
    return out
