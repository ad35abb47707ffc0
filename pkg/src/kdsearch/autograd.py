"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only what the networks and losses in this package need. A ``Tensor`` records
its parents and a closure that pushes its gradient to them; graph edges are
only recorded when some input requires a gradient, so constant inputs (the
frozen teacher's outputs) never receive one.
"""

from __future__ import annotations

import numpy as np


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return self.transpose()

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
        # intermediate gradients are transient, leaves keep theirs
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(_as_array(grad))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: a._accumulate(g * p * a.data ** (p - 1)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate(g * mask))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * 0.5 / out))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        scale = np.where(out > 0, g / safe, 0.0)
        a._accumulate(np.expand_dims(scale, axis) * a.data)

    return _make(out, (a,), bw)


def normalize_rows(a, eps=1e-12):
    """Divide each row of a matrix by its L2 norm; rows below ``eps`` become 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    bad = n < eps
    safe = np.where(bad, 1.0, n)
    out = np.where(bad, 0.0, a.data / safe)

    def bw(g):
        # d(x/|x|) = (g - y (y.g)) / |x|
        dot = (out * g).sum(axis=1, keepdims=True)
        a._accumulate(np.where(bad, 0.0, (g - out * dot) / safe))

    return _make(out, (a,), bw)


def bce_with_logits(z, target):
    """Elementwise binary cross-entropy on logits ``z`` against a 0/1 array."""
    z = as_tensor(z)
    t = _as_array(target)
    out = np.maximum(z.data, 0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))
    sig = 1.0 / (1.0 + np.exp(-z.data))
    return _make(out, (z,), lambda g: z._accumulate(g * (sig - t)))


def smooth_l1(a, beta=1.0):
    a = as_tensor(a)
    ad = np.abs(a.data)
    small = ad < beta
    out = np.where(small, 0.5 * a.data**2 / beta, ad - 0.5 * beta)
    grad = np.where(small, a.data / beta, np.sign(a.data))
    return _make(out, (a,), lambda g: a._accumulate(g * grad))


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xt = x.data.transpose(0, 2, 3, 1)  # NHWC view
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    taps = [(i, j) for i in range(k) for j in range(k)]
    win = [(slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride)) for i, j in taps]
    # cols: (N*Ho*Wo, k*k*Cin), tap-major
    cols = np.concatenate([xt[:, sy, sx, :] for sy, sx in win], axis=-1).reshape(n * ho * wo, -1)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k * k, cin)
            dxt = np.zeros(xt.shape)
            for t, (sy, sx) in enumerate(win):
                dxt[:, sy, sx, :] += dcols[:, :, :, t, :]
            if pad:
                dxt = dxt[:, pad : pad + h, pad : pad + wd, :]
            x._accumulate(dxt.transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)
