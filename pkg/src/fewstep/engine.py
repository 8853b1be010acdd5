"""Reverse-mode automatic differentiation on numpy arrays.

Everything downstream (denoisers, codecs, reward heads) is built from the
small set of primitives in this file.  All data is float64.  Graph recording
is skipped entirely when no input requires gradients, so inference paths run
at plain-numpy speed.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    # keep numpy from absorbing Tensors into object arrays: binary ops with
    # an ndarray on the left must defer to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # ---- graph management ----------------------------------------------
    def detach(self):
        """View of the same values with no graph attached."""
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar; accumulates into .grad of all
        reachable tensors that require gradients."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bw is not None:
                node._bw(node.grad)

    # ---- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bw):
    """Build an op result; record graph only if some parent needs it."""
    out = Tensor(data)
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._bw = bw
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---- arithmetic ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bw)


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def bw(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bw)


def square(a):
    a = as_tensor(a)
    data = a.data * a.data

    def bw(g):
        a._accumulate(g * 2.0 * a.data)

    return _make(data, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), bw)


# ---- elementwise nonlinearities ------------------------------------------

def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _make(data, (a,), bw)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bw)


def silu(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def bw(g):
        a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), bw)


def huber(a, delta):
    """Elementwise Huber penalty: 0.5 x^2 inside |x| <= delta, linear outside."""
    a = as_tensor(a)
    delta = float(delta)
    absx = np.abs(a.data)
    inside = absx <= delta
    data = np.where(inside, 0.5 * a.data * a.data, delta * (absx - 0.5 * delta))

    def bw(g):
        a._accumulate(g * np.where(inside, a.data, delta * np.sign(a.data)))

    return _make(data, (a,), bw)


# ---- reductions and shape ops --------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is None:
            grad = np.broadcast_to(g, a.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.broadcast_to(g, a.data.shape)
        a._accumulate(grad)

    return _make(data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        denom = 1
        for ax in axes:
            denom *= a.data.shape[ax]

    def bw(g):
        g = np.asarray(g) / denom
        if axis is None:
            grad = np.broadcast_to(g, a.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.broadcast_to(g, a.data.shape)
        a._accumulate(grad)

    return _make(data, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), bw)


def getitem(a, key):
    a = as_tensor(a)
    data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), bw)


def embedding(table, idx):
    """Row lookup table[idx] with scatter-add backward into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _make(data, (table,), bw)


# ---- convolution ----------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    col = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return col.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(col, x_shape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x_shape
    col = col.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += col[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, b, stride=1, pad=0):
    """x: (B,C,H,W), w: (O,C,kh,kw), b: (O,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bo, c, h, wi = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError("conv2d channel mismatch")
    col, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wf = w.data.reshape(o, c * kh * kw)
    out = np.einsum("ok,bkl->bol", wf, col) + b.data[None, :, None]
    data = out.reshape(bo, o, ho, wo)

    def bw(g):
        gf = g.reshape(bo, o, ho * wo)
        if b.requires_grad:
            b._accumulate(gf.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", gf, col)
            w._accumulate(gw.reshape(w.data.shape))
        if x.requires_grad:
            gcol = np.einsum("ok,bol->bkl", wf, gf)
            x._accumulate(_col2im(gcol, x.data.shape, kh, kw, stride, pad, ho, wo))

    return _make(data, (x, w, b), bw)
