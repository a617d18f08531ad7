"""A small reverse-mode tape over numpy arrays.

Core of the verified-gradient requirement: every loss in ``learning`` is
built from the primitives here (plus the fused MLP kernel in ``approx``)
and checked against central finite differences. Only what those losses
need is implemented; everything is float64 and eager.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """An array node on the tape.

    ``grad`` accumulates during backward passes. Leaves are created with
    ``requires_grad=True``; interior nodes inherit the flag from their
    parents, and constant subgraphs carry no backward closures at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, bwd) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), bwd=bwd)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bwd)


def neg(a) -> Tensor:
    a = ensure(a)

    def bwd(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bwd)


def power(a, p: float) -> Tensor:
    a = ensure(a)
    out_data = a.data**p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _node(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = ensure(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = ensure(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def tanh(a) -> Tensor:
    a = ensure(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = ensure(a)
    out_data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out_data = np.where(a.data >= 0, out_data, 1.0 - out_data)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed as max(x,0) + log1p(e^{-|x|})."""
    a = ensure(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0, s, 1.0 - s)
        _accum(a, g * s)

    return _node(out_data, (a,), bwd)


def relu(a) -> Tensor:
    a = ensure(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _node(out_data, (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = ensure(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis: int, keepdims=False) -> Tensor:
    a = ensure(a)
    shift = a.data.max(axis=axis, keepdims=True)
    out_keep = shift + np.log(np.exp(a.data - shift).sum(axis=axis, keepdims=True))
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = np.exp(a.data - out_keep)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gg * soft)

    return _node(out_data, (a,), bwd)


def concat(tensors, axis=1) -> Tensor:
    tensors = [ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(t, g[tuple(idx)])
            offset += size

    return _node(out_data, tuple(tensors), bwd)


def take(a, idx) -> Tensor:
    """Basic indexing with gradient scatter-add back into the source."""
    a = ensure(a)
    out_data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _node(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = ensure(a)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside."""
    a = ensure(a)
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _node(out_data, (a,), bwd)


def detach(a) -> Tensor:
    return Tensor(ensure(a).data)


def repeat_rows(a, k: int) -> Tensor:
    """Tile each row k times along axis 0: (B, ...) -> (B*k, ...)."""
    a = ensure(a)
    out_data = np.repeat(a.data, k, axis=0)

    def bwd(g):
        _accum(a, g.reshape((a.data.shape[0], k) + a.data.shape[1:]).sum(axis=1))

    return _node(out_data, (a,), bwd)
