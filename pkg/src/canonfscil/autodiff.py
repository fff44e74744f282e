"""Minimal reverse-mode tape over numpy arrays.

Every operation used by a loss provides an adjoint; finite-difference
checking (``nets.grad_check``) is the arbiter of correctness. Tensors
hold float64 data, gradients accumulate across backward calls until
``zero_grad``. Graph construction can be suspended with ``no_grad()``,
which is how stop-gradient anchors are computed cheaply.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        needed = tuple(p for p in parents if p.requires_grad)
        return Tensor(data, requires_grad=True, parents=needed, backward=backward)
    return Tensor(data)


# -- elementwise ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        a.accumulate(g * 0.5 / out)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a.accumulate(g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a.accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a.accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # stable log(1 + e^a) without the slow logaddexp ufunc
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        a.accumulate(g / (1.0 + np.exp(-a.data)))

    return _make(out, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient where the clamp is active."""
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        a.accumulate(g * ((a.data > lo) & (a.data < hi)))

    return _make(out, (a,), bwd)


# -- shape and reduction --------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (non-repeating) indexing: slices, ints, tuples thereof."""

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate(full)

    return _make(a.data[idx], (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(n)))


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g.T)

    return _make(a.data.T, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate(a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bwd)


# -- structural kernels ---------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    out = kernels.conv2d_forward(x.data, w.data, stride, pad)
    H, W = x.data.shape[2], x.data.shape[3]
    kh, kw = w.data.shape[2], w.data.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x.accumulate(kernels.conv2d_backward_input(g, w.data, stride, pad, H, W))
        if w.requires_grad:
            w.accumulate(kernels.conv2d_backward_weight(x.data, g, stride, pad, kh, kw))

    return _make(out, (x, w), bwd)


def warp(x: Tensor, fc: Tensor, tc: Tensor) -> Tensor:
    """Separable bilinear resample; differentiable in the input and both
    coordinate vectors (already clipped to [-1, 1] upstream)."""
    out = kernels.warp_forward(x.data, fc.data, tc.data)

    def bwd(g):
        gx, gfc, gtc = kernels.warp_backward(
            x.data, fc.data, tc.data, np.ascontiguousarray(g))
        if x.requires_grad:
            x.accumulate(gx)
        if fc.requires_grad:
            fc.accumulate(gfc)
        if tc.requires_grad:
            tc.accumulate(gtc)

    return _make(out, (x, fc, tc), bwd)


# -- composites ------------------------------------------------------

def l2_normalize_rows(z: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise z / ||z||; eps keeps the gradient finite near zero."""
    norm = sqrt(add(tsum(square(z), axis=1, keepdims=True), Tensor(eps)))
    return div(z, norm)


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))  # constant shift
    centered = sub(logits, shift)
    lse = log(tsum(exp(centered), axis=axis, keepdims=True))
    return sub(centered, lse)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = tsum(mul(log_softmax(logits), Tensor(onehot)), axis=1)
    return neg(tmean(picked))
