"""Tape-free reverse-mode differentiation over float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
pushing the output gradient back to them. ``backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes disagree; names the offending layer."""

    def __init__(self, layer: Optional[str], message: str):
        self.layer = layer
        prefix = f"[{layer}] " if layer else ""
        super().__init__(prefix + message)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    """Create an op output; the backward closure is kept only if needed."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=fn if needs else None)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Propagate gradients from ``root`` to every leaf that requires them.

    Named leaves are checked for finiteness afterwards.
    """
    if not root.requires_grad:
        return
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(root.name, "backward() without grad needs a scalar output")
        grad = np.ones_like(root.data)
    order = _toposort(root)
    root.grad = np.asarray(grad, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not node._parents and node.name is not None and node.grad is not None:
            if not np.all(np.isfinite(node.grad)):
                raise NonFiniteGradientError(node.name)


def leaf(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --- elementary ops ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(a.name or b.name, f"cannot add {a.shape} and {b.shape}")

    def fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return make(a.data + b.data, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def total(terms: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors; an empty sum is a constant zero."""
    terms = list(terms)
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def abs_sum(a: Tensor) -> Tensor:
    """Sum of absolute values. The subgradient at exactly zero is zero."""
    sign = np.sign(a.data)
    return make(np.abs(a.data).sum(), (a,), lambda g: _accumulate(a, g * sign))


def square_sum(a: Tensor) -> Tensor:
    return make(np.square(a.data).sum(), (a,), lambda g: _accumulate(a, 2.0 * g * a.data))


def l1_penalty(tensors: Iterable[Tensor]) -> Tensor:
    return total(abs_sum(t) for t in tensors)


def flatten(a: Tensor) -> Tensor:
    shape = a.shape
    return make(a.data.reshape(shape[0], -1), (a,), lambda g: _accumulate(a, g.reshape(shape)))
