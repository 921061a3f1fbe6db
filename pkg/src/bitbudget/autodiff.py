"""Minimal array-valued reverse-mode autodiff on numpy.

Covers exactly the operations the actor-critic network and the character
proxy model need. Gradients accumulate into `.grad` after `backward()` on a
scalar. Dtype follows the inputs (float64 for the policy so finite-difference
checks are meaningful, float32 for proxy training).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor) -> None:
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def detach(self) -> np.ndarray:
        return self.data


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def const(data) -> Tensor:
    return Tensor(np.asarray(data))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    out._backward = bw
    return out


def scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * k, (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g * k

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.grad += _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.grad += _unbroadcast(gb, b.data.shape)

    out._backward = bw
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.data, -1, -2), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += np.swapaxes(g, -1, -2)

    out._backward = bw
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(old)

    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    out._backward = bw
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g * sig * (1.0 + a.data * (1.0 - sig))

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g * e

    out._backward = bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b))

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * take_a, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * ~take_a, b.data.shape)

    out._backward = bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += g * inside

    out._backward = bw
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean()), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += np.broadcast_to(g / a.data.size, a.data.shape)

    out._backward = bw
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), (a,))

    def bw(g):
        if a.requires_grad:
            a.grad += np.expand_dims(g, axis)

    out._backward = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature affine layer normalization over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, (x, gain, bias))
    n = x.data.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain.grad += _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            bias.grad += _unbroadcast(g, bias.data.shape)
        if x.requires_grad:
            gx = g * gain.data
            # d/dx of (x - mu) * inv with mu, inv functions of x
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x.grad += inv * (gx - s1 / n - xhat * s2 / n)

    out._backward = bw
    return out


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free RMS normalization over the last axis."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x.data * inv
    out = Tensor(y, (x,))
    n = x.data.shape[-1]

    def bw(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=-1, keepdims=True)
            x.grad += inv * g - (x.data * (inv ** 3) / n) * dot

    out._backward = bw
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, (a,))

    def bw(g):
        if a.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            a.grad += p * (g - dot)

    out._backward = bw
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis (stable)."""
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = Tensor(logp, (a,))

    def bw(g):
        if a.requires_grad:
            p = np.exp(logp)
            a.grad += g - p * g.sum(axis=-1, keepdims=True)

    out._backward = bw
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: out[..., :] = table[ids[...], :]."""
    out = Tensor(table.data[ids], (table,))

    def bw(g):
        if table.requires_grad:
            np.add.at(table.grad, ids.ravel(), g.reshape(-1, table.data.shape[1]))

    out._backward = bw
    return out


def select_columns(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D input."""
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols], (a,))

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[rows, cols] = g
            a.grad += buf

    out._backward = bw
    return out


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats; logits (N, V), targets (N,)."""
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = logits.data.shape[0]
    loss = -logp[np.arange(n), targets].mean()
    out = Tensor(np.asarray(loss), (logits,))

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            logits.grad += g * p / n

    out._backward = bw
    return out


class Adam:
    """Adam over a list of Tensors; state arrays match each param's dtype."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
