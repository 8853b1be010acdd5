"""Few-step distillation: score matching against a frozen teacher plus
consistency regularization and reward fine-tuning, run from one loop.

The moving parts: a frozen teacher, a student generator (initialized from the
teacher), a "fake" score network tracking the student's own distribution, and
a stop-gradient target copy of the student used on the clean side of the
consistency loss.
"""
import numpy as np

import fewstep.engine as E
from fewstep.engine import Tensor
from .checkpoint import param_hash
from .diffusion import DenoiserModel, denoise_span, guided_x0, loss_conjugate_v
from .optim import AdamW, ema_update
from .schedule import forward_diffuse

GRAD_MODES = ("none", "last-step", "one-random-step")


class DistillError(RuntimeError):
    pass


class ConsistencyHead:
    """Skip/output blend that pins the consistency map to identity at t_min.

    f(x, t) = c_skip(t) x + c_out(t) x0_pred(x, t), with
    c_skip = sd^2 / (tau^2 + sd^2), c_out = tau sd / sqrt(tau^2 + sd^2)
    for tau = (t - t_min) / (t_max - t_min), so c_skip(t_min)=1, c_out(t_min)=0.
    """

    def __init__(self, t_min, t_max, sigma_data=0.5, distance="huber",
                 delta=0.1, weight=1.0):
        if t_max <= t_min:
            raise DistillError("need t_max > t_min")
        if distance not in ("huber", "mse"):
            raise DistillError(f"unknown distance {distance!r}")
        self.t_min = int(t_min)
        self.t_max = int(t_max)
        self.sigma_data = sigma_data
        self.distance = distance
        self.delta = delta
        self.weight = weight

    def _tau(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_min) / (self.t_max - self.t_min)

    def c_skip(self, t):
        tau = self._tau(t)
        return self.sigma_data**2 / (tau**2 + self.sigma_data**2)

    def c_out(self, t):
        tau = self._tau(t)
        return tau * self.sigma_data / np.sqrt(tau**2 + self.sigma_data**2)

    def apply(self, model, x_t, t, c, sched):
        """Consistency map built from the model's x0 prediction."""
        skip = self.c_skip(t)
        out = self.c_out(t)
        x0h = model.predict_x0(x_t, t, c, sched)
        if np.ndim(skip) > 0:
            skip = skip.reshape(-1, 1)
            out = out.reshape(-1, 1)
        return E.as_tensor(x_t) * skip + x0h * out

    def penalty(self, a, b):
        """Mean pointwise distance, Huber or squared error."""
        if self.distance == "mse":
            return E.mean(E.square(a - b)) * self.weight
        return E.mean(E.huber(a - b, self.delta)) * self.weight


class DistillState:
    """All networks and knobs for one distillation run."""

    def __init__(self, teacher, sched, student_grid, cd_grid, rng,
                 beta_cd=0.5, beta_ft=1.0, w_cd=7.5, w_vsd=3.5,
                 fake_ratio=5, m=1, student_lr=2e-4, fake_lr=2e-4,
                 grad_mode="one-random-step", target_ema=0.0,
                 cd_distance="huber", cd_delta=0.1, batch=8,
                 student_kind=None):
        if fake_ratio < 1:
            raise DistillError("fake_ratio must be >= 1")
        if grad_mode not in GRAD_MODES:
            raise DistillError(f"unknown grad_mode {grad_mode!r}")
        if len(cd_grid.steps) < m + 1:
            raise DistillError("cd grid too short for the m-step teacher hop")
        self.teacher = teacher
        if student_kind and student_kind != teacher.param_kind:
            # a different output head cannot inherit the teacher's weights,
            # so the student starts fresh and learns purely by distillation
            ctor = dict(teacher._ctor, param_kind=student_kind)
            self.student = DenoiserModel(rng=rng, **ctor)
        else:
            self.student = teacher.clone()
        self.fake = teacher.clone()
        self.target = self.student.clone()
        self.sched = sched
        self.student_grid = student_grid
        self.cd_grid = cd_grid
        self.rng = rng
        self.beta_cd = beta_cd
        self.beta_ft = beta_ft
        self.w_cd = w_cd
        self.w_vsd = w_vsd
        self.fake_ratio = int(fake_ratio)
        self.m = int(m)
        self.grad_mode = grad_mode
        self.target_ema = target_ema
        self.batch = batch
        self.head = ConsistencyHead(
            int(cd_grid.steps[0]), int(cd_grid.steps[-1]),
            distance=cd_distance, delta=cd_delta)
        self.opt_student = AdamW(self.student.named_parameters(), lr=student_lr)
        self.opt_fake = AdamW(self.fake.named_parameters(), lr=fake_lr)
        self.teacher_hash = param_hash(teacher.named_parameters())

    def refresh_target(self):
        """Pull the stop-gradient copy toward the student (rate 0 = plain copy)."""
        ema_update([p for _, p in self.target.named_parameters()],
                   [p for _, p in self.student.named_parameters()],
                   self.target_ema)


def student_sample(student, c, grid, sched, rng, grad_mode="none"):
    """Few-step generation along the grid; returns the final x0 estimate.

    Starting from pure noise at the top grid time, each step predicts x0 and
    re-noises it down to the next grid time.  grad_mode picks which network
    evaluation keeps its gradient: "none" detaches everything, "last-step"
    keeps only the final evaluation, "one-random-step" keeps one uniformly
    drawn evaluation and lets its gradient ride the affine re-noising path to
    the output.  With an x0-head the affine path does not exist, so the random
    choice collapses to the final step.
    """
    if grad_mode not in GRAD_MODES:
        raise DistillError(f"unknown grad_mode {grad_mode!r}")
    c = np.asarray(c, dtype=np.int64)
    steps = list(grid.descending())
    n_eval = len(steps)
    if grad_mode == "none":
        keep = -1
    elif grad_mode == "last-step" or student.param_kind == "x-pred":
        keep = n_eval - 1
    else:
        keep = int(rng.integers(0, n_eval))

    x = Tensor(rng.standard_normal((len(c), student.latent_dim)))
    noise = [rng.standard_normal(x.shape) for _ in steps[1:]]
    if grad_mode == "none":
        with E.no_grad():
            return _sample_walk(student, x, steps, noise, c, sched, keep)
    return _sample_walk(student, x, steps, noise, c, sched, keep)


def _sample_walk(student, x, steps, noise, c, sched, keep):
    for i, t in enumerate(steps):
        pred = student.predict(x, t, c, sched.T)
        if i != keep:
            pred = pred.detach()
        x0h = student.to_x0(x, pred, t, sched)
        if i + 1 < len(steps):
            x = forward_diffuse(x0h, steps[i + 1], noise[i], sched)
    return x0h


def cd_loss(state, x0, c, rng):
    """Consistency loss on real data against an m-step teacher target.

    A grid index n is drawn so n+m stays on the grid; the noisy point at
    t_{n+m} is pushed down to t_n by m deterministic guided teacher steps
    (no gradient), and the student's consistency map at t_{n+m} must match
    the target copy's map at t_n.
    """
    x0 = np.asarray(x0)
    steps = state.cd_grid.steps
    m = state.m
    n = int(rng.integers(0, len(steps) - m))
    t_hi = int(steps[n + m])
    t_lo = int(steps[n])
    eps = rng.standard_normal(x0.shape)
    x_hi = forward_diffuse(x0, t_hi, eps, state.sched)
    with E.no_grad():
        x_lo = denoise_span(state.teacher, Tensor(x_hi), state.cd_grid,
                            n + m, n, c, state.sched, w=state.w_cd).data
        tgt = state.head.apply(state.target, Tensor(x_lo), t_lo, c, state.sched)
    cur = state.head.apply(state.student, Tensor(x_hi), t_hi, c, state.sched)
    return state.head.penalty(cur, tgt.detach())


def score_from_x0(x_t, x0_hat, t, sched):
    """Gaussian-perturbation score implied by an x0 estimate."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t].reshape(-1, 1)
    return -(x_t - np.sqrt(ab) * x0_hat) / (1.0 - ab)


def vsd_target(state, x_hat, c, rng, t_lo_frac=0.02, t_hi_frac=0.98):
    """Stop-gradient regression point for the distribution-matching loss.

    Perturbs the (detached) student output, reads the real score from the
    guided teacher and the fake score from the student-distribution net, and
    nudges the sample along their difference.  Returns the target ndarray.
    """
    x_hat = np.asarray(x_hat)
    T = state.sched.T
    n = len(x_hat)
    t = rng.integers(int(t_lo_frac * T), int(t_hi_frac * T) + 1, size=n)
    eps = rng.standard_normal(x_hat.shape)
    x_t = forward_diffuse(x_hat, t, eps, state.sched)
    with E.no_grad():
        x0_real = guided_x0(state.teacher, Tensor(x_t), t, c, state.w_vsd,
                            state.sched).data
        x0_fake = state.fake.predict_x0(Tensor(x_t), t, c, state.sched).data
    s_real = score_from_x0(x_t, x0_real, t, state.sched)
    s_fake = score_from_x0(x_t, x0_fake, t, state.sched)
    diff = s_real - s_fake
    b2 = (state.sched.b[t] ** 2).reshape(-1, 1)
    eta = b2 / (np.mean(np.abs(diff), axis=1, keepdims=True) + 1e-8)
    return x_hat + eta * diff


def vsd_loss(state, c, rng, target=None):
    """Half squared error between the student sample and its score-nudged twin.

    The target is treated as a constant, so descending this loss moves each
    sample along (s_real - s_fake) — toward the teacher's distribution and away
    from the student's own — with a per-sample step that keeps the update
    scale-free across dimensions.
    """
    x_hat = student_sample(state.student, c, state.student_grid, state.sched,
                           rng, grad_mode=state.grad_mode)
    if target is None:
        target = vsd_target(state, x_hat.data, c, rng)
    return E.mean(E.square(x_hat - Tensor(target))) * 0.5


def fake_score_update(state, c, rng):
    """One denoising-loss step for the fake net on fresh student samples."""
    with E.no_grad():
        x_hat = student_sample(state.student, c, state.student_grid,
                               state.sched, rng, grad_mode="none").data
    t = rng.integers(1, state.sched.T, size=len(c))
    eps = rng.standard_normal(x_hat.shape)
    state.fake.zero_grad()
    loss = loss_conjugate_v(state.fake, x_hat, c, t, eps, state.sched)
    loss.backward()
    state.opt_fake.step()
    return loss.item()


def distill_snapshot(state):
    return {name: p.data.copy() for name, p in state.student.named_parameters()}


def distill_restore(state, snap):
    for name, p in state.student.named_parameters():
        p.data[...] = snap[name]


def distill_loop(state, dataset, iters, rng, reward_hooks=None,
                 eval_every=0, eval_fn=None, snapshot_every=50, log_every=1):
    """The full multi-objective loop; returns a log dict.

    Per iteration, in order: one generator step on the score-matching loss
    plus beta_cd times the consistency loss; a refresh of the stop-gradient
    target copy (only when the consistency branch is live); fake_ratio steps
    of the fake score net; then, when reward_hooks is given, one reward-model
    regression step and one generator step on beta_ft times the reward loss.
    A non-finite loss halts the loop and restores the last snapshot.
    """
    log = {"iter": [], "vsd": [], "cd": [], "fake": [], "lrm": [], "ft": [],
           "counts": {"vsd": 0, "cd": 0, "fake": 0, "lrm": 0, "ft": 0},
           "halted": None, "eval": []}
    snap = distill_snapshot(state)
    for it in range(iters):
        x0_real, c_real = dataset.sample(rng, state.batch)
        c_gen = rng.integers(0, dataset.num_classes, size=state.batch)

        state.student.zero_grad()
        loss_v = vsd_loss(state, c_gen, rng)
        log["counts"]["vsd"] += 1
        loss_c_val = 0.0
        loss = loss_v
        if state.beta_cd > 0.0:
            loss_c = cd_loss(state, x0_real, c_real, rng)
            loss = loss + loss_c * state.beta_cd
            loss_c_val = loss_c.item()
            log["counts"]["cd"] += 1
        if not np.isfinite(loss.item()):
            log["halted"] = it
            distill_restore(state, snap)
            break
        loss.backward()
        state.opt_student.step()
        if state.beta_cd > 0.0:
            state.refresh_target()

        fake_val = 0.0
        for _ in range(state.fake_ratio):
            fake_val = fake_score_update(state, c_gen, rng)
            log["counts"]["fake"] += 1

        lrm_val = 0.0
        ft_val = 0.0
        if reward_hooks is not None and state.beta_ft > 0.0:
            lrm_val = reward_hooks.train_lrm(state, x0_real, c_real, c_gen, rng)
            log["counts"]["lrm"] += 1
            ft_val = reward_hooks.finetune(state, c_gen, rng)
            log["counts"]["ft"] += 1

        vals = (loss_v.item(), loss_c_val, fake_val, lrm_val, ft_val)
        if not all(np.isfinite(v) for v in vals):
            log["halted"] = it
            distill_restore(state, snap)
            break
        if it % log_every == 0:
            log["iter"].append(it)
            log["vsd"].append(vals[0])
            log["cd"].append(vals[1])
            log["fake"].append(vals[2])
            log["lrm"].append(vals[3])
            log["ft"].append(vals[4])
        if snapshot_every and it % snapshot_every == 0:
            snap = distill_snapshot(state)
        if eval_every and eval_fn is not None and (it + 1) % eval_every == 0:
            log["eval"].append((it, eval_fn(state)))
    return log
