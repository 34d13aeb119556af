"""Minimal reverse-mode tape over numpy arrays.

Just enough operations to train the demo classifier: broadcast arithmetic,
matmul, rectifier, sigmoid, reductions, pooling, the Volterra convolution
layer, and softmax cross-entropy.  Not a general autograd framework.
"""

from __future__ import annotations

import numpy as np

from .unique import VolterraConvLayer, conv2d_backward, conv2d_forward


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(var, g):
    if var.grad is None:
        var.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        var.grad = var.grad + g


class Var:
    """One tape node: a float64 array, its adjoint, and a backward closure."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Seed this node with ones and walk the graph once, in reverse
        topological order."""
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out = Var(self.value + other.value, (self, other))

        def bw():
            _accum(self, _unbroadcast(out.grad, self.value.shape))
            _accum(other, _unbroadcast(out.grad, other.value.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_var(other)
        out = Var(self.value * other.value, (self, other))

        def bw():
            _accum(self, _unbroadcast(out.grad * other.value, self.value.shape))
            _accum(other, _unbroadcast(out.grad * self.value, other.value.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __matmul__(self, other):
        other = as_var(other)
        out = Var(self.value @ other.value, (self, other))

        def bw():
            _accum(self, out.grad @ other.value.T)
            _accum(other, self.value.T @ out.grad)
        out._backward = bw
        return out

    def power(self, exponent: float):
        out = Var(self.value ** exponent, (self,))

        def bw():
            _accum(self, out.grad * exponent * self.value ** (exponent - 1))
        out._backward = bw
        return out

    # -- shape and reductions -------------------------------------------

    def reshape(self, *shape):
        out = Var(self.value.reshape(*shape), (self,))

        def bw():
            _accum(self, out.grad.reshape(self.value.shape))
        out._backward = bw
        return out

    def sum(self, axis=None, keepdims=False):
        out = Var(self.value.sum(axis=axis, keepdims=keepdims), (self,))

        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(g, self.value.shape))
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.value.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.value.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def relu(x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0), (x,))

    def bw():
        _accum(x, out.grad * (x.value > 0))
    out._backward = bw
    return out


def sigmoid(x: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = Var(s, (x,))

    def bw():
        _accum(x, out.grad * s * (1.0 - s))
    out._backward = bw
    return out


def minimum(a: Var, b: Var) -> Var:
    """Elementwise minimum; on ties the gradient goes to the first input."""
    a, b = as_var(a), as_var(b)
    take_a = a.value <= b.value
    out = Var(np.where(take_a, a.value, b.value), (a, b))

    def bw():
        _accum(a, _unbroadcast(out.grad * take_a, a.value.shape))
        _accum(b, _unbroadcast(out.grad * ~take_a, b.value.shape))
    out._backward = bw
    return out


def avg_pool2(x: Var) -> Var:
    """2x2 average pooling with stride 2 over (batch, c, h, w)."""
    b, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial dims")
    pooled = x.value.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Var(pooled, (x,))

    def bw():
        g = np.repeat(np.repeat(out.grad, 2, axis=2), 2, axis=3) / 4.0
        _accum(x, g)
    out._backward = bw
    return out


def global_avg_pool(x: Var) -> Var:
    """(batch, c, h, w) -> (batch, c) spatial mean."""
    return x.mean(axis=(2, 3))


def affine(x: Var, w: Var, b: Var) -> Var:
    """x @ w.T + b for (batch, in) inputs."""
    out = Var(x.value @ w.value.T + b.value, (x, w, b))

    def bw():
        _accum(x, out.grad @ w.value)
        _accum(w, out.grad.T @ x.value)
        _accum(b, out.grad.sum(axis=0))
    out._backward = bw
    return out


def volterra_conv(x: Var, weights: tuple[Var, ...], bias: Var,
                  geometry, order: int) -> Var:
    """Volterra convolution as one fused tape node; the layer backward
    supplies input, weight, and bias adjoints together."""
    layer = VolterraConvLayer(
        geometry=geometry, out_channels=bias.value.shape[0], order=order,
        weights=tuple(w.value for w in weights), bias=bias.value,
    )
    value, saved = conv2d_forward(x.value, layer)
    out = Var(value, (x, *weights, bias))

    def bw():
        gi, gw, gb = conv2d_backward(out.grad, saved, layer)
        _accum(x, gi)
        for wv, g in zip(weights, gw):
            _accum(wv, g)
        _accum(bias, gb)
    out._backward = bw
    return out


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    b = logits.value.shape[0]
    if labels.shape != (b,):
        raise ValueError("need one integer label per row")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), labels].mean()
    out = Var(loss, (logits,))

    def bw():
        soft = np.exp(logp)
        soft[np.arange(b), labels] -= 1.0
        _accum(logits, out.grad * soft / b)
    out._backward = bw
    return out
