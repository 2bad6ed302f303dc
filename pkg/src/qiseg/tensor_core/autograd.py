"""Reverse-mode graph over the ops in :mod:`qiseg.tensor_core.ops`.

A :class:`Var` pairs a value with its accumulated gradient. Graph functions
accept ``Var`` or plain arrays; arrays are treated as constants. Nodes whose
inputs are all constants are not recorded.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops


class Var:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        value = np.asarray(value)
        self.value = value if value.dtype.kind == "f" else value.astype(float)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(value, name=None) -> Var:
    return Var(np.array(value, dtype=float), requires_grad=True, name=name)


def node(value, parents: Sequence[Var], backward_fn: Callable) -> Var:
    """Record an op. ``backward_fn(g)`` returns one gradient (or None) per parent."""
    if not any(p.requires_grad for p in parents):
        return Var(value)
    return Var(value, requires_grad=True, parents=parents, backward_fn=backward_fn)


def backward(root: Var, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not root.requires_grad:
        return
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=float)}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, pg in zip(v.parents, v.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg


# ---------------------------------------------------------------------------
# differentiable wrappers
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias, stride=1, dilation=1, padding=0) -> Var:
    x, kernel, bias = as_var(x), as_var(kernel), as_var(bias)
    out = ops.conv2d_forward(x.value, kernel.value, bias.value, stride, dilation, padding)

    def bw(g):
        return ops.conv2d_backward(g, x.value, kernel.value, stride, dilation, padding)

    return node(out, (x, kernel, bias), bw)


def dense(x, weights, bias) -> Var:
    x, weights, bias = as_var(x), as_var(weights), as_var(bias)
    out = ops.dense_forward(x.value, weights.value, bias.value)
    return node(out, (x, weights, bias), lambda g: ops.dense_backward(g, x.value, weights.value))


def activation(x, kind: str) -> Var:
    x = as_var(x)
    out = ops.activation_forward(x.value, kind)
    if kind == "relu":
        return node(out, (x,), lambda g: (g * (x.value > 0),))
    return node(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Var:
    return activation(x, "relu")


def sigmoid(x) -> Var:
    return activation(x, "sigmoid")


def bilinear_resize(fmap, out_h: int, out_w: int) -> Var:
    fmap = as_var(fmap)
    h, w = fmap.value.shape[-3], fmap.value.shape[-2]
    out = ops.resize_forward(fmap.value, out_h, out_w)
    return node(out, (fmap,), lambda g: (ops.resize_backward(g, h, w),))


def global_avg_pool(fmap) -> Var:
    fmap = as_var(fmap)
    shape = fmap.value.shape
    return node(ops.gap_forward(fmap.value), (fmap,), lambda g: (ops.gap_backward(g, shape),))


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return node(a.value * c, (a,), lambda g: (g * c,))


def index(a, key) -> Var:
    a = as_var(a)

    def bw(g):
        full = np.zeros_like(a.value)
        full[key] = g
        return (full,)

    return node(a.value[key], (a,), bw)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g
