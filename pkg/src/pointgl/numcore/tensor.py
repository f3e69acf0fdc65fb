"""Dense tensors with a dynamic reverse-mode tape.

Tensor storage is a plain numpy array. A ``Variable`` wraps one array and
remembers which operation produced it, so calling ``backward`` on a scalar
loss walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_ids = itertools.count()


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the tensor-wide precision (float32 for training, float64 for checks)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def as_array(x) -> np.ndarray:
    if isinstance(x, Variable):
        return x.value
    return np.asarray(x, dtype=_DTYPE)


class Variable:
    """A tensor value plus a gradient slot on the tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "tape_id", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Variable"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
            self.value = value
        else:
            self.value = np.asarray(value, dtype=_DTYPE)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self.tape_id = next(_ids)
        self.name = name

    @classmethod
    def param(cls, value, name: str | None = None) -> "Variable":
        v = cls(np.array(value, dtype=_DTYPE), requires_grad=True, name=name)
        v.grad = np.zeros_like(v.value)
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.value.dtype})"

    def backward(self) -> None:
        backward(self)

    # operator sugar; the real definitions live in ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Variable) -> None:
    """Populate ``grad`` on every variable reachable from a scalar ``loss``.

    Gradients accumulate, so leaf parameters must be zeroed between steps.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        if node is loss:
            node.grad = g
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.value.shape:
                raise ContractError(
                    f"gradient shape {pg.shape} does not match value shape {p.value.shape}"
                )
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
