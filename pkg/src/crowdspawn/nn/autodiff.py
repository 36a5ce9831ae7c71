"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operation that produced it.
Calling :meth:`Tensor.backward` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that
was created with ``requires_grad=True``.

The graph is rebuilt on every forward pass. Only the handful of operations the
models in this package need are provided; broadcasting is limited to adding a
vector to the rows of a matrix (and scalars against anything).

The free functions :func:`tanh`, :func:`sigmoid`, :func:`softplus`, :func:`exp`
and :func:`log` accept either a Tensor or a plain ndarray, so the same layer
code runs under the tape during training and on raw arrays at inference.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonFiniteLoss


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An ndarray with a gradient slot and a link to the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad)
            other._accumulate(out.grad)

        return Tensor(self.data + other.data, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def backward(out: Tensor) -> None:
            self._accumulate(-out.grad)

        return Tensor(-self.data, _parents=(self,), _backward=backward)

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * other.data)
            other._accumulate(out.grad * self.data)

        return Tensor(self.data * other.data, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other) -> Tensor:
        return self ** -1.0 * other

    def __pow__(self, exponent: float) -> Tensor:
        exponent = float(exponent)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * exponent * self.data ** (exponent - 1.0))

        return Tensor(self.data ** exponent, _parents=(self,), _backward=backward)

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)

        def backward(out: Tensor) -> None:
            g = out.grad
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 2:
                self._accumulate(b @ g)
                other._accumulate(np.outer(a, g))
            elif a.ndim == 2 and b.ndim == 1:
                self._accumulate(np.outer(g, b))
                other._accumulate(a.T @ g)
            else:
                self._accumulate(g @ b.T)
                other._accumulate(a.T @ g)

        return Tensor(self.data @ other.data, _parents=(self, other), _backward=backward)

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other) @ self

    def __getitem__(self, index) -> Tensor:
        def backward(out: Tensor) -> None:
            if not self.requires_grad:
                return
            g = np.zeros_like(self.data)
            np.add.at(g, index, out.grad)
            self._accumulate(g)

        return Tensor(self.data[index], _parents=(self,), _backward=backward)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | None = None) -> Tensor:
        def backward(out: Tensor) -> None:
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor(self.data.sum(axis=axis), _parents=(self,), _backward=backward)

    def mean(self, axis: int | None = None) -> Tensor:
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # -- elementwise nonlinearities -----------------------------------------

    def tanh(self) -> Tensor:
        y = np.tanh(self.data)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * (1.0 - y * y))

        return Tensor(y, _parents=(self,), _backward=backward)

    def sigmoid(self) -> Tensor:
        y = _sigmoid(self.data)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * y * (1.0 - y))

        return Tensor(y, _parents=(self,), _backward=backward)

    def softplus(self) -> Tensor:
        x = self.data

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * _sigmoid(x))

        return Tensor(_softplus(x), _parents=(self,), _backward=backward)

    def exp(self) -> Tensor:
        y = np.exp(self.data)

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad * y)

        return Tensor(y, _parents=(self,), _backward=backward)

    def log(self) -> Tensor:
        x = self.data

        def backward(out: Tensor) -> None:
            self._accumulate(out.grad / x)

        return Tensor(np.log(x), _parents=(self,), _backward=backward)

    # -- reverse pass -------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every upstream tensor that requires it."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        if not math.isfinite(float(self.data)):
            raise NonFiniteLoss(f"loss is {float(self.data)}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: list, axis: int = -1) -> Tensor:
    """Concatenate tensors (or arrays) along ``axis``."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(out: Tensor) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(np.take(out.grad, np.arange(lo, hi), axis=axis))

    data = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor(data, _parents=tuple(parts), _backward=backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def sigmoid(x):
    return x.sigmoid() if isinstance(x, Tensor) else _sigmoid(np.asarray(x, dtype=np.float64))


def softplus(x):
    return x.softplus() if isinstance(x, Tensor) else _softplus(np.asarray(x, dtype=np.float64))


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def value(x) -> np.ndarray:
    """Raw ndarray behind a Tensor (or the array itself)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)
