"""Minimal reverse-mode differentiation on float64 numpy arrays.

Just enough tape machinery for the two-branch MIL heads: affine layers,
rectification, axis softmax, elementwise arithmetic, clamp, log, and
reductions.  Every node is a ``Var``; constants are vars nobody reads
gradients from.  ``backward`` accumulates gradients in topological order.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(value) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(a.value + b.value, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(a.value - b.value, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(a.value * b.value, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), lambda g: (g * c,))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def matmul(a: Var, b: Var) -> Var:
    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return Var(a.value @ b.value, (a, b), vjp)


def relu(a: Var) -> Var:
    keep = a.value > 0.0

    def vjp(g):
        return (g * keep,)

    return Var(np.where(keep, a.value, 0.0), (a,), vjp)


def softmax(a: Var, axis: int) -> Var:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Var(y, (a,), vjp)


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def clamp(a: Var, lo: float, hi: float) -> Var:
    """Clip values; gradient passes only through the unclamped region."""
    inside = (a.value > lo) & (a.value < hi)

    def vjp(g):
        return (g * inside,)

    return Var(np.clip(a.value, lo, hi), (a,), vjp)


def pow_const(a: Var, p: float) -> Var:
    def vjp(g):
        return (g * p * np.power(a.value, p - 1.0),)

    return Var(np.power(a.value, p), (a,), vjp)


def sum_all(a: Var) -> Var:
    def vjp(g):
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Var(a.value.sum(), (a,), vjp)


def sum_axis(a: Var, axis: int) -> Var:
    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return Var(a.value.sum(axis=axis), (a,), vjp)


def add_many(terms: list[Var]) -> Var:
    if not terms:
        return constant(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for the whole graph."""
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(node.grad)):
            parent.grad = parent.grad + pg
