"""Discrete noise schedules, time grids, and forward/posterior coefficients.

Timesteps are integers t in [0, T].  t=0 is clean data (alpha_bar=1 for the
variance-preserving kind) and sampling grids live in [0, T-1], e.g. the
uniform 50-step grid for T=1000 reads [19, 39, ..., 999].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, as_tensor as _as_tensor


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    kind: str                 # "vp-cosine" | "rectified-flow"
    T: int
    a: np.ndarray             # signal coefficient, indexed 0..T
    b: np.ndarray             # noise coefficient, indexed 0..T
    alpha_bar: np.ndarray | None = None   # cumulative alpha (vp only)
    alpha: np.ndarray | None = None       # per-step alpha (vp only), alpha[0] == 1
    params: dict = field(default_factory=dict)

    def require_vp(self, op):
        if self.alpha_bar is None:
            raise ScheduleError(f"{op} requires a variance-preserving schedule, not {self.kind!r}")

    def check_t(self, t):
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"timestep out of range [0, {self.T}]")
        return t


def vp_cosine_schedule(T=1000, s=0.008, alpha_floor=1e-3):
    """Squared-cosine cumulative-alpha schedule with a per-step alpha floor."""
    if T < 2:
        raise ScheduleError("T must be at least 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    abar_raw = f / f[0]
    alpha = np.ones(T + 1)
    alpha[1:] = np.maximum(abar_raw[1:] / abar_raw[:-1], alpha_floor)
    abar = np.cumprod(alpha)
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    return NoiseSchedule(
        kind="vp-cosine", T=T, a=a, b=b, alpha_bar=abar, alpha=alpha,
        params={"s": s, "alpha_floor": alpha_floor},
    )


def rectified_flow_schedule(T=1000):
    """Linear interpolation coefficients a=1-t/T, b=t/T (not variance preserving)."""
    t = np.arange(T + 1, dtype=np.float64)
    return NoiseSchedule(kind="rectified-flow", T=T, a=1.0 - t / T, b=t / T)


def make_schedule(kind, T=1000, **kw):
    if kind == "vp-cosine":
        return vp_cosine_schedule(T, **kw)
    if kind == "rectified-flow":
        return rectified_flow_schedule(T)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _coef(arr, t, ndim):
    """Index coefficient array at t and shape it for broadcasting over samples."""
    c = arr[t]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape((-1,) + (1,) * (ndim - 1))


def forward_diffuse(x0, t, eps, sched):
    """x_t = a_t x0 + b_t eps.  Works on ndarrays or Tensors."""
    t = sched.check_t(t)
    nd = x0.ndim
    ca = _coef(sched.a, t, nd)
    cb = _coef(sched.b, t, nd)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return x0 * ca + eps * cb
    return ca * x0 + cb * eps


def conjugate_gamma(alpha_bar):
    """gamma = sqrt(abar) / (sqrt(abar) + sqrt(1-abar)); the conjugate mixing weight."""
    ra = np.sqrt(alpha_bar)
    rb = np.sqrt(1.0 - alpha_bar)
    return ra / (ra + rb)


def conjugate_point(x_t, t, sched):
    """Rescale x_t onto the line segment between x0 and eps.

    Returns (y_t, gamma_t) with y_t = x_t / (sqrt(abar_t) + sqrt(1-abar_t)),
    so that y_t = gamma_t x0 + (1-gamma_t) eps when x_t = a_t x0 + b_t eps.
    """
    sched.require_vp("conjugate_point")
    t = sched.check_t(t)
    abar = sched.alpha_bar[t]
    denom = np.sqrt(abar) + np.sqrt(1.0 - abar)
    gamma = np.sqrt(abar) / denom
    nd = x_t.ndim
    if np.ndim(denom) > 0:
        denom = denom.reshape((-1,) + (1,) * (nd - 1))
    if isinstance(x_t, Tensor):
        return x_t * (1.0 / denom), gamma
    return x_t / denom, gamma


@dataclass
class TimeGrid:
    steps: np.ndarray  # strictly increasing ints within [0, T-1]

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        if self.steps.ndim != 1 or len(self.steps) == 0:
            raise ScheduleError("grid must be a non-empty 1-D sequence")
        if np.any(np.diff(self.steps) <= 0):
            raise ScheduleError("grid steps must be strictly increasing")

    def __len__(self):
        return len(self.steps)

    def descending(self):
        return self.steps[::-1]


def ddim_grid(sched, n):
    """n uniformly strided steps ending at T-1: [T/n - 1, 2T/n - 1, ..., T-1]."""
    T = sched.T
    if n < 1 or n > T:
        raise ScheduleError(f"step count {n} outside [1, {T}]")
    if T % n != 0:
        raise ScheduleError(f"step count {n} must divide T={T}")
    stride = T // n
    return TimeGrid(np.arange(stride - 1, T, stride))


def posterior_params(x_t, x0_hat, t, t_prev, sched):
    """Gaussian posterior N(mu, sigma^2) for the jump t -> t_prev given x0_hat.

    mu    = c0 x0_hat + c1 x_t
    c0    = sqrt(abar_prev) (1 - abar_t/abar_prev) / (1 - abar_t)
    c1    = sqrt(abar_t/abar_prev) (1 - abar_prev) / (1 - abar_t)
    sigma^2 = (1 - abar_t/abar_prev)(1 - abar_prev) / (1 - abar_t)

    For consecutive steps this is the textbook DDPM posterior; t_prev=0 gives
    sigma=0 and mu=x0_hat (deterministic final step).  sigma is returned as an
    ndarray (per-sample if t is an array) and never carries gradients.
    """
    sched.require_vp("posterior_params")
    t = sched.check_t(t)
    t_prev = sched.check_t(t_prev)
    if np.any(t_prev >= t):
        raise ScheduleError("posterior requires t_prev < t")
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    r = ab_t / ab_p
    c0 = np.sqrt(ab_p) * (1.0 - r) / (1.0 - ab_t)
    c1 = np.sqrt(r) * (1.0 - ab_p) / (1.0 - ab_t)
    var = (1.0 - r) * (1.0 - ab_p) / (1.0 - ab_t)
    sigma = np.sqrt(np.maximum(var, 0.0))
    nd = x_t.ndim
    if np.ndim(c0) > 0:
        c0 = c0.reshape((-1,) + (1,) * (nd - 1))
        c1 = c1.reshape((-1,) + (1,) * (nd - 1))
    if isinstance(x_t, Tensor) or isinstance(x0_hat, Tensor):
        # keep a Tensor on the left of every binary op so numpy does not
        # try to absorb it into an object array
        mu = _as_tensor(x0_hat) * c0 + _as_tensor(x_t) * c1
    else:
        mu = c0 * x0_hat + c1 * x_t
    return mu, sigma
