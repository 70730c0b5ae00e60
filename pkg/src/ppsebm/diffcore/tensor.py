"""Dense float64 tensors and the tape that records operations on them.

A :class:`Tape` is a context manager. While one is active on the current
thread, every primitive op whose inputs require gradients appends a node to
it. Nodes are appended in execution order, so the node list is already a
topological order and :meth:`Tape.backward` only has to walk it in reverse.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or infinity."""


class Tensor:
    """A dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the implementations live in ops.
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class GradMap(dict):
    """Mapping from leaf :class:`Tensor` to its gradient array.

    Missing entries read as ``None``; use :meth:`of` for a zero fallback.
    """

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


class Tape:
    """Records primitive ops for one backward pass (single use, one thread)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradMap:
        """Return d(loss)/d(leaf) for every grad-enabled leaf reached.

        ``wrt`` restricts the returned map; leaves not reached get zeros.
        The tape cannot be reused afterwards.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                leaves[key] = p
        self.nodes = []
        out = GradMap()
        if wrt is None:
            for key, t in leaves.items():
                if key not in produced and key in grads:
                    out[t] = grads[key]
        else:
            for t in wrt:
                g = grads.get(id(t))
                out[t] = np.zeros_like(t.data) if g is None else g
        return out


def make_output(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable,
                check_finite: bool = True) -> Tensor:
    """Wrap an op result and record it on the active tape if needed."""
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.name = None
    if track:
        tape.record(out, tuple(parents), vjp)
    return out
