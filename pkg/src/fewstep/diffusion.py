"""Conditional denoisers: the conjugate-velocity objective, guidance,
prediction transforms, and multi-step sampling.

The network predicts either the velocity v = x0 - eps ("conjugate-v") or x0
directly ("x-pred").  For the velocity head, the clean-sample estimate is
recovered exactly by

    x0_hat = (x_t + sqrt(1 - abar_t) v) / (sqrt(abar_t) + sqrt(1 - abar_t)).
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from . import nn
from .engine import Tensor
from .schedule import forward_diffuse, posterior_params

PARAM_KINDS = ("conjugate-v", "x-pred")


class DiffusionError(RuntimeError):
    pass


def time_features(t, T, dim=64):
    """Sinusoidal features of t/T at geometrically spaced frequencies."""
    if dim % 2:
        raise ValueError("time feature dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    half = dim // 2
    freqs = np.pi * (2.0 ** np.arange(half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserModel(nn.Module):
    """MLP denoiser for flat latents; optional small conv trunk for grid latents.

    Class index num_classes-1 is reserved for the unconditional (null) class.
    """

    def __init__(self, latent_dim, num_classes, rng, param_kind="conjugate-v",
                 hidden=256, depth=3, time_dim=64, class_dim=16,
                 latent_shape=None, conv_channels=32):
        if param_kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameterization {param_kind!r}")
        self._ctor = dict(latent_dim=latent_dim, num_classes=num_classes,
                          param_kind=param_kind, hidden=hidden, depth=depth,
                          time_dim=time_dim, class_dim=class_dim,
                          latent_shape=latent_shape,
                          conv_channels=conv_channels)
        self.param_kind = param_kind
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.time_dim = time_dim
        self.latent_shape = tuple(latent_shape) if latent_shape else None
        self.class_emb = nn.Embedding(num_classes, class_dim, rng)
        if self.latent_shape:
            c = self.latent_shape[0]
            self.conv1 = nn.Conv2d(c, conv_channels, 3, rng, pad=1)
            self.norm1 = nn.GroupNorm(4, conv_channels)
            self.conv2 = nn.Conv2d(conv_channels, conv_channels, 3, rng, pad=1)
            self.norm2 = nn.GroupNorm(4, conv_channels)
            spatial = self.latent_shape[1] * self.latent_shape[2]
            feat = conv_channels * spatial
        else:
            feat = latent_dim
        dims = [feat + time_dim + class_dim] + [hidden] * depth + [latent_dim]
        self.trunk = nn.MLP(dims, rng)

    @property
    def null_class(self):
        return self.num_classes - 1

    def clone(self):
        """A structurally identical model holding a copy of the weights."""
        twin = DenoiserModel(rng=np.random.default_rng(0), **self._ctor)
        twin.copy_from(self)
        return twin

    def features(self, x):
        if not self.latent_shape:
            return x
        b = x.shape[0]
        h = E.reshape(x, (b,) + self.latent_shape)
        h = E.silu(self.norm1(self.conv1(h)))
        h = E.silu(self.norm2(self.conv2(h)))
        return E.reshape(h, (b, -1))

    def predict(self, x, t, c, T):
        """Raw head output (v or x0 depending on param_kind)."""
        x = E.as_tensor(x)
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if c is None:
            c = np.full(b, self.null_class, dtype=np.int64)
        else:
            c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        tf = Tensor(time_features(t, T, self.time_dim))
        ce = self.class_emb(c)
        h = E.concat([self.features(x), tf, ce], axis=1)
        return self.trunk(h)

    def predict_x0(self, x_t, t, c, sched):
        pred = self.predict(x_t, t, c, sched.T)
        return self.to_x0(x_t, pred, t, sched)

    def to_x0(self, x_t, pred, t, sched):
        if self.param_kind == "x-pred":
            return pred
        return x_from_v(x_t, pred, t, sched)


def x_from_v(x_t, v, t, sched):
    """Invert the conjugate-velocity parameterization to an x0 estimate."""
    sched.require_vp("x_from_v")
    t = sched.check_t(t)
    a = sched.a[t]
    b = sched.b[t]
    denom = a + b
    nd = x_t.ndim
    if np.ndim(b) > 0:
        b = b.reshape((-1,) + (1,) * (nd - 1))
        denom = denom.reshape((-1,) + (1,) * (nd - 1))
    return (x_t + v * b) * (1.0 / denom)


def tweedie_x0(x_t, eps_pred, t, sched):
    """x0 estimate from a noise prediction: (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    sched.require_vp("tweedie_x0")
    t = sched.check_t(t)
    a = sched.a[t]
    b = sched.b[t]
    nd = x_t.ndim
    if np.ndim(a) > 0:
        a = a.reshape((-1,) + (1,) * (nd - 1))
        b = b.reshape((-1,) + (1,) * (nd - 1))
    return (x_t - eps_pred * b) * (1.0 / a)


def loss_conjugate_v(model, x0, c, t, eps, sched):
    """Mean squared error of the velocity head against x0 - eps."""
    if model.param_kind != "conjugate-v":
        raise DiffusionError("conjugate-velocity loss needs a velocity-head model")
    x_t = forward_diffuse(np.asarray(x0), t, np.asarray(eps), sched)
    pred = model.predict(Tensor(x_t), t, c, sched.T)
    target = Tensor(np.asarray(x0) - np.asarray(eps))
    return E.mean(E.square(pred - target))


def loss_standard_v(model, x0, c, t, eps, sched):
    """Reference objective: classic velocity target a_t eps - b_t x0."""
    sched.require_vp("loss_standard_v")
    t_arr = sched.check_t(t)
    x_t = forward_diffuse(np.asarray(x0), t, np.asarray(eps), sched)
    a = sched.a[t_arr].reshape(-1, 1)
    b = sched.b[t_arr].reshape(-1, 1)
    pred = model.predict(Tensor(x_t), t, c, sched.T)
    target = Tensor(a * np.asarray(eps) - b * np.asarray(x0))
    return E.mean(E.square(pred - target))


def apply_cfg(model, x_t, t, c, w, T):
    """Classifier-free guided prediction: out(c) + w (out(c) - out(null)).

    w=0 is a single conditional call; the null class is the model's reserved
    final index.  Conditional and unconditional branches share one batched
    forward pass.
    """
    if w == 0.0:
        return model.predict(x_t, t, c, T)
    x_t = E.as_tensor(x_t)
    b = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
    both = model.predict(
        E.concat([x_t, x_t], axis=0),
        np.concatenate([t, t]),
        np.concatenate([c, np.full(b, model.null_class, dtype=np.int64)]),
        T,
    )
    cond = both[:b]
    null = both[b:]
    return cond * (1.0 + w) - null * w


def guided_x0(model, x_t, t, c, w, sched):
    pred = apply_cfg(model, x_t, t, c, w, sched.T)
    if np.any(~np.isfinite(pred.data)):
        raise DiffusionError(f"non-finite prediction at t={t}")
    return model.to_x0(x_t, pred, t, sched)


def denoise_step(model, x_t, t, t_prev, c, sched, w=0.0, stochastic=False, rng=None):
    """One reverse jump t -> t_prev.

    Deterministic form (default):
        x_prev = a_prev x0_hat + b_prev eps_hat
    Stochastic form adds posterior noise and shrinks the eps coefficient to
    sqrt(1 - abar_prev - sigma^2); the final jump to t_prev=0 is always
    deterministic because its posterior variance vanishes.
    """
    x0h = guided_x0(model, x_t, t, c, w, sched)
    a_t = float(sched.a[t])
    b_t = float(sched.b[t])
    a_p = float(sched.a[t_prev])
    ab_p = float(sched.alpha_bar[t_prev])
    eps_hat = (x_t - x0h * a_t) * (1.0 / b_t)
    sigma = 0.0
    if stochastic and t_prev > 0:
        _, sig = posterior_params(x_t, x0h, t, t_prev, sched)
        sigma = float(sig)
    coef = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
    out = x0h * a_p + eps_hat * coef
    if sigma > 0.0:
        if rng is None:
            raise DiffusionError("stochastic denoise_step needs an rng")
        out = out + Tensor(sigma * rng.standard_normal(x0h.shape))
    return out


def denoise_span(model, x, grid, i_from, i_to, c, sched, w=0.0):
    """Walk the grid deterministically from index i_from down to i_to."""
    steps = grid.steps
    if not (0 <= i_to < i_from < len(steps)):
        raise DiffusionError("need grid indices with i_to < i_from")
    for i in range(i_from, i_to, -1):
        x = denoise_step(model, x, int(steps[i]), int(steps[i - 1]), c, sched, w=w)
    return x


def ddim_sample(model, c, grid, sched, rng, w=0.0, stochastic=False):
    """Sample from noise down the grid; returns the final x0 estimate (ndarray)."""
    c = np.asarray(c, dtype=np.int64)
    with E.no_grad():
        x = Tensor(rng.standard_normal((len(c), model.latent_dim)))
        chain = list(grid.descending()) + [0]
        for t, t_prev in zip(chain[:-1], chain[1:]):
            x = denoise_step(model, x, int(t), int(t_prev), c, sched,
                             w=w, stochastic=stochastic, rng=rng)
    return x.data


def fit_denoiser(model, sample_batch, sched, iters, rng, lr=1e-3, batch=64,
                 cfg_dropout=0.1, weight_decay=0.0, loss_fn=loss_conjugate_v,
                 callback=None):
    """Train a denoiser; sample_batch(rng, n) -> (x0, class indices).

    A cfg_dropout fraction of class labels is replaced by the null class so
    the model also learns the unconditional branch.
    """
    from .optim import AdamW

    opt = AdamW(model.named_parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    for it in range(iters):
        x0, c = sample_batch(rng, batch)
        c = np.array(c, dtype=np.int64)
        if cfg_dropout > 0.0:
            drop = rng.random(len(c)) < cfg_dropout
            c[drop] = model.null_class
        t = rng.integers(1, sched.T, size=len(c))
        eps = rng.standard_normal(x0.shape)
        model.zero_grad()
        loss = loss_fn(model, x0, c, t, eps, sched)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(it, losses[-1])
    return losses
