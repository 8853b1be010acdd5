"""Rewards and reward-driven fine-tuning.

Three layers: pixel-space reward oracles (numpy-only, never differentiated),
a compact latent reward model regressed onto pixel-reward-through-decoder
targets, and the two fine-tuning paths — direct gradients through the latent
reward model versus a REINFORCE policy-gradient baseline over the sampler's
Gaussian transitions.
"""
import time

import numpy as np

import fewstep.engine as E
from fewstep.engine import Tensor
from . import nn
from .distill import student_sample
from .metrics import wasserstein2
from .optim import AdamW
from .schedule import posterior_params

REWARD_NAMES = ("brightness", "compressibility", "mode_affinity")


class RewardError(RuntimeError):
    pass


class PixelReward:
    """Named scalar reward on pixel batches.

    evaluate() accepts only plain arrays: rewards are oracles, not layers, and
    refusing Tensors keeps non-differentiable rewards off any gradient path by
    construction.
    """

    def __init__(self, name, fn, differentiable, conditional=False):
        self.name = name
        self._fn = fn
        self.differentiable = differentiable
        self.conditional = conditional

    def evaluate(self, pixels, c=None):
        if isinstance(pixels, Tensor):
            raise TypeError("pixel rewards are evaluated outside the graph; "
                            "pass plain arrays")
        pixels = np.asarray(pixels, dtype=np.float64)
        if self.conditional and c is None:
            raise RewardError(f"reward {self.name!r} needs a condition")
        out = self._fn(pixels.reshape(len(pixels), -1), c)
        return np.asarray(out, dtype=np.float64)


def _brightness(p, c):
    return p.mean(axis=1)


def _compressibility(p, c):
    q = np.clip((p * 4).astype(np.int64), 0, 3)
    return -np.array([len(np.unique(row)) for row in q], dtype=np.float64)


def make_reward(name, dataset=None):
    """Build a reward oracle by name; mode_affinity binds the dataset's
    per-class targets (mixture means or sprite templates)."""
    if name == "brightness":
        return PixelReward("brightness", _brightness, differentiable=True)
    if name == "compressibility":
        return PixelReward("compressibility", _compressibility,
                           differentiable=False)
    if name == "mode_affinity":
        if dataset is None:
            raise RewardError("mode_affinity needs a dataset for its targets")
        if dataset.kind == "gauss2d":
            targets = np.asarray(dataset.meta["class_means"])
        else:
            targets = np.asarray(dataset.meta["templates"])

        def affinity(p, c):
            c = np.asarray(c, dtype=np.int64)
            return -np.linalg.norm(p - targets[c], axis=1)

        return PixelReward("mode_affinity", affinity, differentiable=True,
                           conditional=True)
    raise RewardError(f"unknown reward {name!r}")


def group_mean_reward(base, group_size):
    """Average the reward over fixed-size sample groups (each member receives
    the group mean), the batch analog of frame averaging."""

    def fn(p, c):
        v = base.evaluate(p, c)
        if len(v) % group_size:
            raise RewardError("batch size must be a multiple of group_size")
        g = v.reshape(-1, group_size).mean(axis=1)
        return np.repeat(g, group_size)

    return PixelReward(f"{base.name}/group{group_size}", fn,
                       base.differentiable, base.conditional)


class LatentRewardModel(nn.Module):
    """Small latent-space reward regressor: norm/SiLU feature stack (conv for
    grid-shaped latents, affine otherwise), pooling, scalar head.

    The conditional variant attends from the pooled feature to the class
    token: a single-head query/key/value block where the lone class token
    competes with a zero-logit null slot, so the learned gate decides how much
    of the class value to mix in.
    """

    def __init__(self, latent_dim, rng, latent_shape=None, channels=8,
                 hidden=16, conditional=False, num_classes=9, class_dim=8,
                 att_dim=8):
        self._ctor = dict(latent_dim=latent_dim, latent_shape=latent_shape,
                          channels=channels, hidden=hidden,
                          conditional=conditional, num_classes=num_classes,
                          class_dim=class_dim, att_dim=att_dim)
        self.latent_dim = latent_dim
        self.latent_shape = tuple(latent_shape) if latent_shape else None
        self.conditional = conditional
        if self.latent_shape:
            cin = self.latent_shape[0]
            self.conv1 = nn.Conv2d(cin, channels, 3, rng, pad=1)
            self.norm1 = nn.GroupNorm(2, channels)
            self.conv2 = nn.Conv2d(channels, channels, 3, rng, pad=1)
            self.norm2 = nn.GroupNorm(2, channels)
            feat = channels
        else:
            self.lin1 = nn.Linear(latent_dim, hidden, rng)
            self.norm1 = nn.GroupNorm(4, hidden)
            self.lin2 = nn.Linear(hidden, hidden, rng)
            self.norm2 = nn.GroupNorm(4, hidden)
            feat = hidden
        if conditional:
            self.class_emb = nn.Embedding(num_classes, class_dim, rng)
            self.wq = nn.Linear(feat, att_dim, rng)
            self.wk = nn.Linear(class_dim, att_dim, rng)
            self.wv = nn.Linear(class_dim, feat, rng)
            self._att_scale = 1.0 / np.sqrt(att_dim)
        self.head = nn.Linear(feat, 1, rng)

    def features(self, z):
        z = E.as_tensor(z)
        if self.latent_shape:
            h = E.reshape(z, (z.shape[0],) + self.latent_shape)
            h = E.silu(self.norm1(self.conv1(h)))
            h = E.silu(self.norm2(self.conv2(h)))
            return nn.avg_pool_all(h)
        h = E.silu(self.norm1(self.lin1(z)))
        return E.silu(self.norm2(self.lin2(h)))

    def forward(self, z, c=None):
        h = self.features(z)
        if self.conditional:
            if c is None:
                raise RewardError("conditional reward model needs class labels")
            e = self.class_emb(np.asarray(c, dtype=np.int64))
            q = self.wq(h)
            k = self.wk(e)
            v = self.wv(e)
            score = E.sum_(q * k, axis=1, keepdims=True) * self._att_scale
            h = h + E.sigmoid(score) * v
        return self.head(h)

    def __call__(self, z, c=None):
        return self.forward(z, c)

    def evaluate(self, z, c=None):
        with E.no_grad():
            return self.forward(z, c).data[:, 0]


class AnalyticLatentReward:
    """Closed-form latent reward for oracle tests; same interface, no params."""

    def __init__(self, fn):
        self._fn = fn

    def __call__(self, z, c=None):
        out = self._fn(E.as_tensor(z), c)
        if len(out.shape) == 1:
            out = E.reshape(out, (-1, 1))
        return out

    def evaluate(self, z, c=None):
        with E.no_grad():
            return self(z, c).data[:, 0]


def lrm_train_step(lrm, opt, pixel_reward, codec, real_latents, gen_latents,
                   c_real, c_gen):
    """One regression step: fit the latent model to the pixel reward seen
    through the decoder, on the merged real + generated batch."""
    z = np.concatenate([np.asarray(real_latents), np.asarray(gen_latents)])
    c = np.concatenate([np.asarray(c_real), np.asarray(c_gen)])
    targets = pixel_reward.evaluate(codec.decode(z),
                                    c if pixel_reward.conditional else None)
    lrm.zero_grad()
    pred = lrm(Tensor(z), c)
    loss = E.mean(E.square(pred - Tensor(targets.reshape(-1, 1))))
    loss.backward()
    opt.step()
    return loss.item()


def lrm_finetune_step(state, lrm, c, rng, accum=1):
    """One generator step on -E[reward model(sample)], scaled by beta_ft,
    with optional gradient accumulation over micro-batches."""
    state.student.zero_grad()
    total = 0.0
    for _ in range(accum):
        x_hat = student_sample(state.student, c, state.student_grid,
                               state.sched, rng, grad_mode=state.grad_mode)
        loss = E.mean(lrm(x_hat, c)) * (-state.beta_ft / accum)
        loss.backward()
        total += loss.item()
    state.opt_student.step()
    return total


def gaussian_logp(x, mu, sigma):
    """Per-sample log density of N(mu, sigma^2 I); x constant, mu may carry
    gradients, sigma is a positive scalar."""
    x = np.asarray(x)
    d = x.shape[1]
    diff = E.as_tensor(mu) - x
    ss = E.sum_(E.square(diff), axis=1)
    const = -d * np.log(sigma) - 0.5 * d * np.log(2.0 * np.pi)
    return ss * (-0.5 / sigma**2) + const


def ddpo_rollout(state, c, rng):
    """Sample the student grid with stochastic posterior transitions.

    Returns (records, x0): one record per stochastic transition holding the
    constants needed to re-evaluate its log-density under the current policy.
    The final jump to t=0 is the deterministic x0 prediction and carries no
    density.
    """
    c = np.asarray(c, dtype=np.int64)
    steps = list(state.student_grid.descending()) + [0]
    records = []
    with E.no_grad():
        x = rng.standard_normal((len(c), state.student.latent_dim))
        for t_hi, t_lo in zip(steps[:-1], steps[1:]):
            x0h = state.student.predict_x0(Tensor(x), t_hi, c, state.sched).data
            if t_lo == 0:
                x = x0h
                continue
            mu, sigma = posterior_params(x, x0h, int(t_hi), int(t_lo), state.sched)
            sigma = float(sigma)
            if sigma == 0.0:
                x = mu
                continue
            x_next = mu + sigma * rng.standard_normal(x.shape)
            records.append({"x_t": x, "x_next": x_next, "t_hi": int(t_hi),
                            "t_lo": int(t_lo), "sigma": sigma})
            x = x_next
    return records, x


def ddpo_loss(state, records, rewards, c, n_trunc):
    """Policy-gradient loss on the last n_trunc stochastic transitions:
    -sum(log p) * reward, reward held constant."""
    if n_trunc < 1:
        raise RewardError("n_trunc must be >= 1")
    if n_trunc > len(state.student_grid.steps):
        raise RewardError("n_trunc exceeds the sampling grid length")
    window = records[-n_trunc:]
    if not window:
        raise RewardError("no stochastic transitions to score")
    c = np.asarray(c, dtype=np.int64)
    r = Tensor(np.asarray(rewards, dtype=np.float64))
    loss = None
    for rec in window:
        x0h = state.student.predict_x0(Tensor(rec["x_t"]), rec["t_hi"], c,
                                       state.sched)
        mu, sigma = posterior_params(rec["x_t"], x0h, rec["t_hi"], rec["t_lo"],
                                     state.sched)
        logp = gaussian_logp(rec["x_next"], mu, float(sigma))
        term = E.mean(logp * r) * (-1.0)
        loss = term if loss is None else loss + term
    info = {"logp_timesteps": [rec["t_lo"] for rec in window],
            "reward_mean": float(np.mean(rewards))}
    return loss * state.beta_ft, info


def ddpo_step(state, pixel_reward, codec, c, n_trunc, rng,
              center_rewards=True):
    """One REINFORCE update: roll out, score the decoded samples, and push
    the truncated-window log-densities toward high-reward trajectories.
    Centering the rewards per batch is the usual variance-reduction baseline
    and does not bias the gradient."""
    records, x0 = ddpo_rollout(state, c, rng)
    rewards = pixel_reward.evaluate(codec.decode(x0),
                                    c if pixel_reward.conditional else None)
    scored = rewards - rewards.mean() if center_rewards else rewards
    state.student.zero_grad()
    loss, info = ddpo_loss(state, records, scored, c, n_trunc)
    loss.backward()
    state.opt_student.step()
    info["reward_mean"] = float(np.mean(rewards))
    info["x0"] = x0
    return loss.item(), info


class RewardHooks:
    """Adapter the distillation loop calls for its reward branches.

    mode "lrm": regression on the latent reward model plus generator steps
    through it.  Three fitting schedules are supported: one regression step
    per iteration on the live batch (default), frozen after a pre-training
    pass (fit_online=False), or chunked — visited latents accumulate in a
    replay buffer and every refit_every iterations the model gets
    refit_iters regression steps on buffer draws.  Single-step refits on
    tiny batches leave the model's behaviour between data and generator
    unconstrained and can whip the generator around, so the chunked
    schedule is what keeps long fine-tuning runs steerable.  mode "ddpo":
    the policy-gradient baseline (no model to train).
    """

    def __init__(self, pixel, codec, lrm=None, mode="lrm", lrm_lr=1e-3,
                 accum=1, n_trunc=2, group_size=None, fit_online=True,
                 refit_every=1, refit_iters=1, refit_batch=64,
                 buffer_size=2048):
        if mode not in ("lrm", "ddpo"):
            raise RewardError(f"unknown reward mode {mode!r}")
        if mode == "lrm" and lrm is None:
            raise RewardError("lrm mode needs a latent reward model")
        self.pixel = group_mean_reward(pixel, group_size) if group_size else pixel
        self.codec = codec
        self.lrm = lrm
        self.mode = mode
        self.accum = accum
        self.n_trunc = n_trunc
        # fit_online=False keeps a pre-trained reward model frozen; the loop
        # then only takes generator steps through it
        self.fit_online = fit_online
        self.refit_every = refit_every
        self.refit_iters = refit_iters
        self.refit_batch = refit_batch
        self.buffer_size = buffer_size
        self._buf = {"real": None, "c_real": None, "gen": None, "c_gen": None}
        self._calls = 0
        self.last_info = None
        self.opt_lrm = None
        if isinstance(lrm, nn.Module):
            self.opt_lrm = AdamW(lrm.named_parameters(), lr=lrm_lr)

    def _buffer_push(self, key, arr):
        old = self._buf[key]
        arr = np.concatenate([old, arr]) if old is not None else np.asarray(arr)
        self._buf[key] = arr[-self.buffer_size:]

    def train_lrm(self, state, x0_real, c_real, c_gen, rng):
        if self.mode != "lrm" or self.opt_lrm is None or not self.fit_online:
            return 0.0
        with E.no_grad():
            gen = student_sample(state.student, c_gen, state.student_grid,
                                 state.sched, rng, grad_mode="none").data
        if self.refit_every == 1 and self.refit_iters == 1:
            return lrm_train_step(self.lrm, self.opt_lrm, self.pixel,
                                  self.codec, x0_real, gen, c_real, c_gen)
        self._buffer_push("real", x0_real)
        self._buffer_push("c_real", c_real)
        self._buffer_push("gen", gen)
        self._buffer_push("c_gen", c_gen)
        self._calls += 1
        if self._calls % self.refit_every:
            return 0.0
        val = 0.0
        for _ in range(self.refit_iters):
            i = rng.integers(0, len(self._buf["real"]), size=self.refit_batch)
            j = rng.integers(0, len(self._buf["gen"]), size=self.refit_batch)
            val = lrm_train_step(self.lrm, self.opt_lrm, self.pixel,
                                 self.codec, self._buf["real"][i],
                                 self._buf["gen"][j], self._buf["c_real"][i],
                                 self._buf["c_gen"][j])
        return val

    def finetune(self, state, c, rng):
        if self.mode == "lrm":
            return lrm_finetune_step(state, self.lrm, c, rng, self.accum)
        loss, info = ddpo_step(state, self.pixel, self.codec, c,
                               self.n_trunc, rng)
        self.last_info = info
        return loss


def _true_reward(state, pixel_reward, codec, rng, n=256):
    c = rng.integers(0, state.student.num_classes - 1, size=n)
    with E.no_grad():
        x = student_sample(state.student, c, state.student_grid, state.sched,
                           rng, grad_mode="none").data
    vals = pixel_reward.evaluate(codec.decode(x),
                                 c if pixel_reward.conditional else None)
    return float(vals.mean()), x, c


def finetune_compare(make_state, lrm_factory, pixel_reward, codec, dataset,
                     iters, seed, eval_every=25, accum=1, n_trunc=2,
                     eval_n=512, lrm_lr=1e-3, batch=None):
    """Matched-budget comparison of the two fine-tuning paths.

    Both modes start from identical student checkpoints (make_state must
    return a fresh copy) and run the same number of iterations.  The report
    carries per-mode curves of (iter, predicted reward, true reward,
    Wasserstein-to-data) plus final rewards and wall time.
    """
    report = {}
    data_rng = np.random.default_rng(seed + 1)
    ref_latents, _ = dataset.sample(data_rng, eval_n)
    for mode in ("lrm", "ddpo"):
        state = make_state()
        rng = np.random.default_rng(seed)
        nb = batch or state.batch
        lrm = lrm_factory() if mode == "lrm" else None
        opt_lrm = None
        if lrm is not None and isinstance(lrm, nn.Module):
            opt_lrm = AdamW(lrm.named_parameters(), lr=lrm_lr)
        curve = []
        t0 = time.perf_counter()
        for it in range(iters):
            c = rng.integers(0, dataset.num_classes, size=nb)
            if mode == "lrm":
                x_real, c_real = dataset.sample(rng, nb)
                if opt_lrm is not None:
                    with E.no_grad():
                        gen = student_sample(state.student, c,
                                             state.student_grid, state.sched,
                                             rng, grad_mode="none").data
                    lrm_train_step(lrm, opt_lrm, pixel_reward, codec,
                                   x_real, gen, c_real, c)
                lrm_finetune_step(state, lrm, c, rng, accum=accum)
            else:
                ddpo_step(state, pixel_reward, codec, c, n_trunc, rng)
            if (it + 1) % eval_every == 0 or it == iters - 1:
                eval_rng = np.random.default_rng(seed + 7 + it)
                r_true, x_gen, c_gen = _true_reward(state, pixel_reward, codec,
                                                    eval_rng, n=eval_n)
                r_pred = float("nan")
                if lrm is not None:
                    r_pred = float(np.mean(lrm.evaluate(x_gen, c_gen)))
                w2 = wasserstein2(x_gen, ref_latents)
                curve.append((it + 1, r_pred, r_true, w2))
        wall = time.perf_counter() - t0
        report[mode] = {
            "curve": curve,
            "final_reward": curve[-1][2],
            "final_w2": curve[-1][3],
            "wall_time": wall,
        }
    return report
