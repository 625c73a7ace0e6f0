"""Dense float64 tensors and the operation tape used for reverse-mode differentiation."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives inputs of non-conforming shapes."""


def shape_error(op: str, *shapes) -> ShapeError:
    joined = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


class Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered list of recorded operations.

    Operations append in execution order, so every record's inputs were produced
    by earlier records (or are leaves). `backward` walks the list in reverse.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        out._tape = self
        out._index = len(self.records)
        self.records.append(Record(out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A dense row-major array of 64-bit floats.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` accumulator of
    the same shape. Tensors produced by recorded operations remember their tape
    position so :func:`backward` can find them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Optional[Tape] = None
        self._index: Optional[int] = None

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use mul with a reciprocal")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the current tape if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._tape = None
    out._index = None
    out.grad = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Calling this twice without zeroing adds the gradients twice.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += 1.0
        return
    tape = loss._tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad += gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
