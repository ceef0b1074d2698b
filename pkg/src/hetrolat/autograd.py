"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the handful of operations the model needs are defined. Every node keeps
its forward value and a closure mapping the upstream gradient to parent
gradients; :meth:`Var.backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


def param(value, name=None) -> Var:
    return Var(value, requires_grad=True, name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))


def spmm(m: sp.spmatrix, a: Var) -> Var:
    """Constant sparse matrix times a differentiable dense matrix."""
    mt = m.T.tocsr()
    return Var(np.asarray(m @ a.value), (a,), lambda g: (np.asarray(mt @ g),))


def elu(a: Var) -> Var:
    x = a.value
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    dx = np.where(x > 0, 1.0, neg_part + 1.0)
    return Var(out, (a,), lambda g: (g * dx,))


def power(a: Var, p: float) -> Var:
    if p == 1:
        return a
    x = a.value if float(p).is_integer() else np.maximum(a.value, 0.0)
    return Var(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Var) -> Var:
    return mul(vsum(a), 1.0 / a.value.size)


def concat(parts, axis=1) -> Var:
    parts = [as_var(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def column(a: Var, j: int) -> Var:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, j:j + 1] = g
        return (out,)

    return Var(a.value[:, j:j + 1], (a,), back)


def rownorm(a: Var) -> Var:
    """Rows scaled to unit L2 norm; all-zero rows stay zero (with zero gradient)."""
    x = a.value
    norm = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x / safe, 0.0)

    def back(g):
        proj = np.einsum("ij,ij->i", y, g)[:, None]
        return ((g - y * proj) / safe * (norm > 0),)

    return Var(y, (a,), back)


def softmax_rows(a: Var) -> Var:
    x = a.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - np.einsum("ij,ij->i", s, g)[:, None]),)

    return Var(s, (a,), back)


def masked_logsumexp(a: Var, mask: np.ndarray) -> Var:
    """Row-wise log-sum-exp over entries where ``mask`` is true (every row needs one)."""
    x = np.where(mask, a.value, -np.inf)
    mx = x.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(x - mx), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    out = (mx + np.log(tot)).ravel()
    w = e / tot
    return Var(out, (a,), lambda g: (w * g[:, None],))
