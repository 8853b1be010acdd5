"""AdamW and exponential-moving-average parameter updates."""

from __future__ import annotations

import numpy as np


class GradientError(RuntimeError):
    """Raised when a step would consume non-finite gradients."""


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied directly to the parameter, not through the moments,
    so it acts as true L2 shrinkage independent of the adaptive scaling.
    """

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        for name, p in self.named_params:
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient; call backward first")
            if not np.all(np.isfinite(p.grad)):
                raise GradientError(f"non-finite gradient in {name!r} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update


def ema_update(target_params, source_params, rate):
    """target <- rate * target + (1 - rate) * source, elementwise.

    rate=0 copies the source; rate=1 leaves the target unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("ema rate must lie in [0, 1]")
    target_params = list(target_params)
    source_params = list(source_params)
    if len(target_params) != len(source_params):
        raise ValueError("parameter lists differ in length")
    for t, s in zip(target_params, source_params):
        if t.data.shape != s.data.shape:
            raise ValueError("parameter shape mismatch in ema_update")
        t.data *= rate
        t.data += (1.0 - rate) * s.data
