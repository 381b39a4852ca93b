"""Minimal reverse-mode autodiff over the kernels in :mod:`ops`.

A :class:`Tensor` wraps an array and remembers how it was produced. Calling
``loss.backward()`` walks the graph in reverse topological order and
accumulates ``.grad`` on every tensor that requires it. Gradients are
skipped for branches where nothing upstream requires them, which keeps
discriminator-only updates from paying for generator weight gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g
            if node._parents:
                node.grad = None if node is not self else node.grad


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def apply(data, parents: Sequence[Tensor], backward) -> Tensor:
    """Attach a custom op: ``backward(grad_out)`` returns one gradient per parent."""
    return _make(data, parents, backward)


# --- layers ---------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding=0) -> Tensor:
    y, cache = ops.conv2d(x.data, w.data, None if b is None else b.data, stride, padding)

    def back(g):
        dx, dw, db = ops.conv2d_backward(g, cache, x.requires_grad, w.requires_grad)
        return (dx, dw) if b is None else (dx, dw, db)

    return _make(y, (x, w) if b is None else (x, w, b), back)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    y, cache = ops.conv_transpose2d(x.data, w.data, None if b is None else b.data, stride, padding)

    def back(g):
        dx, dw, db = ops.conv_transpose2d_backward(g, cache, x.requires_grad, w.requires_grad)
        return (dx, dw) if b is None else (dx, dw, db)

    return _make(y, (x, w) if b is None else (x, w, b), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool = True) -> Tensor:
    y, cache = ops.batch_norm(x.data, gamma.data, beta.data, running_mean, running_var, train)
    return _make(y, (x, gamma, beta), lambda g: ops.batch_norm_backward(g, cache))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    y, cache = ops.instance_norm(x.data, gamma.data, beta.data)
    return _make(y, (x, gamma, beta), lambda g: ops.instance_norm_backward(g, cache))


def relu(x: Tensor) -> Tensor:
    return _make(ops.relu(x.data), (x,), lambda g: (ops.relu_backward(g, x.data),))


def leaky_relu(x: Tensor, slope: float = ops.LEAKY_SLOPE) -> Tensor:
    return _make(ops.leaky_relu(x.data, slope), (x,),
                 lambda g: (ops.leaky_relu_backward(g, x.data, slope),))


def tanh(x: Tensor) -> Tensor:
    y = ops.tanh(x.data)
    return _make(y, (x,), lambda g: (ops.tanh_backward(g, y),))


def sigmoid(x: Tensor) -> Tensor:
    y = ops.sigmoid(x.data)
    return _make(y, (x,), lambda g: (ops.sigmoid_backward(g, y),))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    return _make(ops.clamp(x.data, lo, hi), (x,), lambda g: (ops.clamp_backward(g, x.data, lo, hi),))


def max_pool2d(x: Tensor) -> Tensor:
    y, cache = ops.max_pool2d(x.data)
    return _make(y, (x,), lambda g: (ops.max_pool2d_backward(g, cache),))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return _make(ops.upsample_nearest(x.data, factor), (x,),
                 lambda g: (ops.upsample_nearest_backward(g, factor),))


def reflect_pad(x: Tensor, p: int) -> Tensor:
    return _make(ops.reflect_pad(x.data, p), (x,), lambda g: (ops.reflect_pad_backward(g, p),))


def zero_pad(x: Tensor, padding) -> Tensor:
    return _make(ops.zero_pad(x.data, padding), (x,), lambda g: (ops.zero_pad_backward(g, padding),))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """``scale * x + shift`` for python scalars."""
    return _make(x.data * x.data.dtype.type(scale) + x.data.dtype.type(shift), (x,),
                 lambda g: (g * g.dtype.type(scale),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = np.cumsum([t.data.shape[axis] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum_all(xs: Sequence[Tensor]) -> Tensor:
    return _make(sum(t.data for t in xs), tuple(xs), lambda g: tuple(g for _ in xs))
