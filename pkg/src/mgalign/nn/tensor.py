"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on :class:`Tensor` records its inputs and a backward closure.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients additively, so a tensor
used by several consumers receives the sum of their contributions.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array with an optional gradient and a backward recipe."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic protocol -------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Iterable["Tensor"], op: str,
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        parents = tuple(parents)
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate gradients are held locally; only leaves keep .grad
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node._pending = grads
            node._backward(g)
            del node._pending

    def _send(self, parent: "Tensor", g: np.ndarray) -> None:
        # called from inside a backward closure
        if not parent.requires_grad:
            return
        g = _unbroadcast(g, parent.shape)
        store = self._pending
        key = id(parent)
        if key in store:
            store[key] = store[key] + g
        else:
            store[key] = g

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            out._send(self, g)
            out._send(other, g)
        out = Tensor._make(self.data + other.data, (self, other), "add", bw)
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bw(g):
            out._send(self, -g)
        out = Tensor._make(-self.data, (self,), "neg", bw)
        return out

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            out._send(self, g)
            out._send(other, -g)
        out = Tensor._make(self.data - other.data, (self, other), "sub", bw)
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            out._send(self, g * other.data)
            out._send(other, g * self.data)
        out = Tensor._make(self.data * other.data, (self, other), "mul", bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            out._send(self, g / other.data)
            out._send(other, -g * self.data / (other.data ** 2))
        out = Tensor._make(self.data / other.data, (self, other), "div", bw)
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)

        def bw(g):
            out._send(self, g * exponent * self.data ** (exponent - 1.0))
        out = Tensor._make(self.data ** exponent, (self,), "pow", bw)
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            out._send(self, np.broadcast_to(g, shape))
        out = Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", bw)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape

        def bw(g):
            out._send(self, g.reshape(src))
        out = Tensor._make(self.data.reshape(shape), (self,), "reshape", bw)
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))

        def bw(g):
            out._send(self, g.transpose(inverse))
        out = Tensor._make(self.data.transpose(axes), (self,), "transpose", bw)
        return out

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            out._send(self, full)
        out = Tensor._make(self.data[index], (self,), "getitem", bw)
        return out

    # -- unary math ------------------------------------------------------
    def exp(self) -> "Tensor":
        value = np.exp(self.data)

        def bw(g):
            out._send(self, g * value)
        out = Tensor._make(value, (self,), "exp", bw)
        return out

    def log(self) -> "Tensor":
        def bw(g):
            out._send(self, g / self.data)
        out = Tensor._make(np.log(self.data), (self,), "log", bw)
        return out

    def sqrt(self) -> "Tensor":
        value = np.sqrt(self.data)

        def bw(g):
            out._send(self, g * 0.5 / value)
        out = Tensor._make(value, (self,), "sqrt", bw)
        return out

    def relu(self) -> "Tensor":
        on = self.data > 0

        def bw(g):
            out._send(self, g * on)
        out = Tensor._make(np.where(on, self.data, 0.0), (self,), "relu", bw)
        return out

    def tanh(self) -> "Tensor":
        value = np.tanh(self.data)

        def bw(g):
            out._send(self, g * (1.0 - value ** 2))
        out = Tensor._make(value, (self,), "tanh", bw)
        return out

    def sigmoid(self) -> "Tensor":
        value = _sigmoid(self.data)

        def bw(g):
            out._send(self, g * value * (1.0 - value))
        out = Tensor._make(value, (self,), "sigmoid", bw)
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape} "
                         f"(inner dims {a.shape[-1] if a.ndim else None} vs "
                         f"{b.shape[-2] if b.ndim > 1 else b.shape[0]})")

    def bw(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        out._send(a, ga)
        out._send(b, gb)
    out = Tensor._make(a.data @ b.data, (a, b), "matmul", bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            out._send(t, piece)
    out = Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            out._send(t, np.take(g, i, axis=axis))
    out = Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, "stack", bw)
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        out._send(a, np.where(cond, g, 0.0))
        out._send(b, np.where(cond, 0.0, g))
    out = Tensor._make(np.where(cond, a.data, b.data), (a, b), "where", bw)
    return out


def scatter_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at ``index`` in an otherwise-zero array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    buf = np.zeros((n_rows,) + x.shape[1:])
    buf[index] = x.data

    def bw(g):
        out._send(x, g[index])
    out = Tensor._make(buf, (x,), "scatter_rows", bw)
    return out
