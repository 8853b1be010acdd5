"""Parameterized layers built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Tensor


class Module:
    """Base for anything holding named parameters."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def copy_from(self, other):
        """Copy values from a module of identical structure."""
        mine = self.named_parameters()
        theirs = other.named_parameters()
        if len(mine) != len(theirs):
            raise ValueError("module structures differ")
        for (_, dst), (_, src) in zip(mine, theirs):
            if dst.data.shape != src.data.shape:
                raise ValueError("parameter shape mismatch")
            dst.data[...] = src.data

    def load_state(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        scale = 1.0 / np.sqrt(n_in)
        self.w = _param(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = _param(np.zeros(n_out))

    def __call__(self, x):
        return E.matmul(x, self.w) + self.b


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0):
        scale = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.w = _param(rng.normal(0.0, scale, size=(c_out, c_in, kernel, kernel)))
        self.b = _param(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return E.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    """Normalizes over channel groups; accepts (B,C) or (B,C,H,W)."""

    def __init__(self, groups, channels, eps=1e-5):
        if channels % groups:
            raise ValueError("channels must divide evenly into groups")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def __call__(self, x):
        shp = x.shape
        b, c = shp[0], shp[1]
        spatial = int(np.prod(shp[2:])) if len(shp) > 2 else 1
        g = self.groups
        xr = E.reshape(x, (b, g, (c // g) * spatial))
        mu = E.mean(xr, axis=2, keepdims=True)
        xc = xr - mu
        var = E.mean(E.square(xc), axis=2, keepdims=True)
        xn = xc / E.sqrt(var + self.eps)
        xn = E.reshape(xn, shp)
        gshape = (1, c) + (1,) * (len(shp) - 2)
        return xn * E.reshape(self.gamma, gshape) + E.reshape(self.beta, gshape)


class Embedding(Module):
    def __init__(self, n, dim, rng):
        self.table = _param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n, dim)))

    def __call__(self, idx):
        return E.embedding(self.table, idx)


class MLP(Module):
    """Stack of Linear layers with SiLU between them."""

    def __init__(self, dims, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = E.silu(layer(x))
        return self.layers[-1](x)


def avg_pool_all(x):
    """Adaptive average pool to 1x1 over spatial dims of (B,C,H,W)."""
    return E.mean(x, axis=(2, 3))
