"""Reward oracles, the latent reward model, and both fine-tuning paths."""
import types

import numpy as np
import pytest

import fewstep.engine as E
from fewstep.engine import Tensor
from fewstep import nn
from fewstep.codec import identity_codec
from fewstep.data import gen_gauss2d, gen_sprites8
from fewstep.diffusion import DenoiserModel
from fewstep.distill import DistillState
from fewstep.optim import AdamW
from fewstep.reward import (
    AnalyticLatentReward,
    LatentRewardModel,
    PixelReward,
    RewardError,
    RewardHooks,
    ddpo_loss,
    ddpo_rollout,
    ddpo_step,
    finetune_compare,
    gaussian_logp,
    group_mean_reward,
    lrm_finetune_step,
    lrm_train_step,
    make_reward,
)
from fewstep.schedule import ddim_grid, vp_cosine_schedule

SCHED = vp_cosine_schedule(1000)


def tiny_state(rng, grid_n=4, **kw):
    teacher = DenoiserModel(2, 9, rng, hidden=16, depth=1, time_dim=8,
                            class_dim=4)
    return DistillState(teacher, SCHED, ddim_grid(SCHED, grid_n),
                        ddim_grid(SCHED, 50), rng, **kw)


# ---------------------------------------------------------------- oracles

def test_brightness_of_uniform_image():
    pr = make_reward("brightness")
    assert np.allclose(pr.evaluate(np.full((3, 64), 0.5)), 0.5)
    assert pr.differentiable


def test_compressibility_counts_quantized_levels():
    pr = make_reward("compressibility")
    assert not pr.differentiable
    const = np.full((2, 64), 0.6)
    assert np.array_equal(pr.evaluate(const), [-1.0, -1.0])
    four = np.tile([0.05, 0.3, 0.55, 0.8], (1, 16))
    assert pr.evaluate(four)[0] == -4.0


def test_mode_affinity_peaks_at_the_mode():
    ds = gen_gauss2d(0, 256)
    pr = make_reward("mode_affinity", ds)
    means = np.asarray(ds.meta["class_means"])
    at_mode = pr.evaluate(means[[2]], np.array([2]))
    assert abs(at_mode[0]) < 1e-12
    off = pr.evaluate(means[[2]] + 0.5, np.array([2]))
    assert off[0] < at_mode[0]
    with pytest.raises(RewardError):
        pr.evaluate(means[[2]])


def test_mode_affinity_sprites_uses_templates():
    ds = gen_sprites8(0, 64)
    pr = make_reward("mode_affinity", ds)
    t = np.asarray(ds.meta["templates"])
    assert abs(pr.evaluate(t[[5]], np.array([5]))[0]) < 1e-12


def test_rewards_refuse_tensors(rng):
    for name in ("brightness", "compressibility"):
        pr = make_reward(name)
        with pytest.raises(TypeError):
            pr.evaluate(Tensor(rng.standard_normal((2, 4))))


def test_unknown_reward_name():
    with pytest.raises(RewardError):
        make_reward("sharpness")
    with pytest.raises(RewardError):
        make_reward("mode_affinity")  # dataset required


def test_group_mean_adaptor(rng):
    pr = make_reward("brightness")
    g = group_mean_reward(pr, 4)
    p = rng.random((8, 16))
    v = g.evaluate(p)
    per = pr.evaluate(p)
    want = np.repeat(per.reshape(2, 4).mean(axis=1), 4)
    assert np.allclose(v, want)
    assert v[0] == v[1] == v[2] == v[3]
    with pytest.raises(RewardError):
        g.evaluate(p[:6])


# ---------------------------------------------------- latent reward model

def test_lrm_shapes_and_gradient_reach(rng):
    lrm = LatentRewardModel(2, rng, conditional=True)
    z = Tensor(rng.standard_normal((6, 2)))
    out = lrm(z, np.arange(6) % 3)
    assert out.shape == (6, 1)
    lrm.zero_grad()
    E.mean(out).backward()
    for name, p in lrm.named_parameters():
        assert np.any(p.grad != 0.0), name


def test_lrm_conv_variant_and_compactness(rng):
    lrm = LatentRewardModel(16, rng, latent_shape=(4, 2, 2))
    out = lrm(Tensor(rng.standard_normal((3, 16))))
    assert out.shape == (3, 1)
    decoder = nn.MLP([16, 256, 512, 64], rng)
    assert lrm.param_count() / decoder.param_count() < 0.01


def test_lrm_conditional_requires_labels(rng):
    lrm = LatentRewardModel(2, rng, conditional=True)
    with pytest.raises(RewardError):
        lrm(Tensor(rng.standard_normal((2, 2))))


def test_lrm_fits_constant_reward(rng):
    ds = gen_gauss2d(0, 2048)
    codec = identity_codec(2)
    lrm = LatentRewardModel(2, rng)
    opt = AdamW(lrm.named_parameters(), lr=3e-3)
    const = PixelReward("const", lambda p, c: np.full(len(p), 0.7), True)
    for _ in range(500):
        a, ca = ds.sample(rng, 64)
        b, cb = ds.sample(rng, 64)
        loss = lrm_train_step(lrm, opt, const, codec, a, b, ca, cb)
    assert loss < 1e-4


def test_lrm_fits_linear_reward(rng):
    ds = gen_gauss2d(0, 8192)
    codec = identity_codec(2)
    lrm = LatentRewardModel(2, rng)
    opt = AdamW(lrm.named_parameters(), lr=3e-3)
    pr = make_reward("brightness")
    for _ in range(1000):
        a, ca = ds.sample(rng, 64)
        b, cb = ds.sample(rng, 64)
        lrm_train_step(lrm, opt, pr, codec, a, b, ca, cb)
    hx, _ = ds.sample(rng, 1024)
    mse = np.mean((lrm.evaluate(hx) - pr.evaluate(hx)) ** 2)
    assert mse < 1e-3


def test_analytic_reward_wrapper(rng):
    target = np.array([1.0, -1.0])
    lrm = AnalyticLatentReward(
        lambda z, c: E.sum_(E.square(z - Tensor(target)), axis=1) * (-1.0))
    z = rng.standard_normal((5, 2))
    vals = lrm.evaluate(z)
    assert np.allclose(vals, -np.sum((z - target) ** 2, axis=1))


# ------------------------------------------------------- fine-tune paths

class MeanShiftGenerator(nn.Module):
    """x0-head stub whose samples are noise + mu; lets tests read gradients
    on the mean directly."""

    param_kind = "x-pred"
    latent_dim = 2
    num_classes = 9

    def __init__(self, mu0):
        self.mu = Tensor(np.asarray(mu0, dtype=np.float64), requires_grad=True)

    def predict(self, x, t, c, T):
        return E.as_tensor(x) + self.mu

    def to_x0(self, x_t, pred, t, sched):
        return pred

    def predict_x0(self, x_t, t, c, sched):
        return self.predict(x_t, t, c, sched.T)


def shift_state(mu0, beta_ft=1.0, lr=5e-2, grid_n=1):
    gen = MeanShiftGenerator(mu0)
    return types.SimpleNamespace(
        student=gen,
        student_grid=ddim_grid(SCHED, grid_n),
        sched=SCHED,
        grad_mode="last-step",
        beta_ft=beta_ft,
        opt_student=AdamW([("mu", gen.mu)], lr=lr),
    )


def test_constant_lrm_gives_zero_generator_gradient():
    state = shift_state([2.0, -1.0])
    lrm = AnalyticLatentReward(lambda z, c: E.sum_(z * 0.0, axis=1) + 3.0)
    before = state.student.mu.data.copy()
    loss = lrm_finetune_step(state, lrm, np.zeros(16, dtype=int),
                             np.random.default_rng(0))
    assert abs(loss + 3.0) < 1e-12
    assert np.array_equal(state.student.mu.data, before)


def test_quadratic_lrm_pulls_mean_to_target():
    target = np.array([1.5, -0.5])
    state = shift_state([-2.0, 2.0], lr=5e-2)
    lrm = AnalyticLatentReward(
        lambda z, c: E.sum_(E.square(z - Tensor(target)), axis=1) * (-1.0))
    rng = np.random.default_rng(1)
    dists = [np.linalg.norm(state.student.mu.data - target)]
    for _ in range(100):
        lrm_finetune_step(state, lrm, np.zeros(64, dtype=int), rng)
        dists.append(np.linalg.norm(state.student.mu.data - target))
    smooth = np.convolve(dists, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 1e-3)
    assert dists[-1] < 0.25 * dists[0]


def test_lrm_finetune_gradient_direction():
    # descent on -reward must push the mean toward the reward peak
    target = np.array([3.0, 0.0])
    state = shift_state([0.0, 0.0])
    lrm = AnalyticLatentReward(
        lambda z, c: E.sum_(E.square(z - Tensor(target)), axis=1) * (-1.0))
    gen = state.student
    gen.zero_grad()
    from fewstep.distill import student_sample
    x = student_sample(gen, np.zeros(256, dtype=int), state.student_grid,
                       SCHED, np.random.default_rng(2), "last-step")
    (E.mean(lrm(x)) * (-1.0)).backward()
    # gradient of the loss w.r.t. mu ~ 2(mu - target); descent moves toward target
    assert gen.mu.grad @ (gen.mu.data - target) > 0


def test_gaussian_logp_value_and_gradient(rng):
    mu = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    sigma = 0.5
    lp = gaussian_logp(mu.data.copy(), mu, sigma)
    want = -3 * np.log(sigma) - 1.5 * np.log(2 * np.pi)
    assert np.allclose(lp.data, want)
    E.sum_(lp).backward()
    assert np.allclose(mu.grad, 0.0)


def test_ddpo_truncation_window_timesteps(rng):
    state = tiny_state(rng)
    ds = gen_gauss2d(0, 128)
    pr = make_reward("mode_affinity", ds)
    codec = identity_codec(2)
    c = rng.integers(0, 8, size=8)
    _, info = ddpo_step(state, pr, codec, c, 2, rng)
    assert sorted(info["logp_timesteps"]) == [249, 499]
    _, info1 = ddpo_step(state, pr, codec, c, 1, rng)
    assert info1["logp_timesteps"] == [249]


def test_ddpo_zero_reward_leaves_generator_unchanged(rng):
    state = tiny_state(rng)
    zero = PixelReward("zero", lambda p, c: np.zeros(len(p)), True)
    before = {n: p.data.copy() for n, p in state.student.named_parameters()}
    loss, _ = ddpo_step(state, zero, identity_codec(2),
                        rng.integers(0, 8, size=8), 2, rng,
                        center_rewards=False)
    assert loss == 0.0
    for n, p in state.student.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_ddpo_validation_errors(rng):
    state = tiny_state(rng)
    records, x0 = ddpo_rollout(state, np.zeros(4, dtype=int), rng)
    r = np.ones(4)
    with pytest.raises(RewardError):
        ddpo_loss(state, records, r, np.zeros(4, dtype=int), 0)
    with pytest.raises(RewardError):
        ddpo_loss(state, records, r, np.zeros(4, dtype=int), 99)
    one = tiny_state(rng, grid_n=1)
    rec1, _ = ddpo_rollout(one, np.zeros(4, dtype=int), rng)
    with pytest.raises(RewardError, match="stochastic"):
        ddpo_loss(one, rec1, r, np.zeros(4, dtype=int), 1)


def test_ddpo_rollout_shapes_and_sigma(rng):
    state = tiny_state(rng)
    records, x0 = ddpo_rollout(state, np.zeros(8, dtype=int), rng)
    assert x0.shape == (8, 2)
    assert [r["t_lo"] for r in records] == [749, 499, 249]
    assert all(r["sigma"] > 0 for r in records)


def test_reinforce_matches_analytic_gradient():
    # Gaussian policy, linear reward: E[grad(-logp * R)] = -w exactly.
    rng = np.random.default_rng(0)
    n, d, sigma = 10_000, 2, 0.7
    w = np.array([0.8, -1.3])
    mu = Tensor(np.array([0.4, 0.1]), requires_grad=True)
    noise = sigma * rng.standard_normal((n, d))
    x = mu.data + noise
    r = x @ w
    lp = gaussian_logp(x, E.reshape(mu, (1, d)) + np.zeros((n, d)), sigma)
    loss = E.mean(lp * Tensor(-r))
    loss.backward()
    # per-sample gradients for the standard-error bound
    per = -(x - mu.data) / sigma**2 * r[:, None]
    se = per.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mu.grad - (-w)) < 3 * se + 1e-12)
    assert np.all(np.abs(per.mean(axis=0) - mu.grad) < 1e-10)


def test_reward_hooks_modes(rng):
    ds = gen_gauss2d(0, 512)
    codec = identity_codec(2)
    pr = make_reward("brightness")
    state = tiny_state(rng)
    lrm = LatentRewardModel(2, rng)
    hooks = RewardHooks(pr, codec, lrm=lrm, mode="lrm")
    x0, c0 = ds.sample(rng, 8)
    c_gen = rng.integers(0, 8, size=8)
    assert np.isfinite(hooks.train_lrm(state, x0, c0, c_gen, rng))
    assert np.isfinite(hooks.finetune(state, c_gen, rng))
    dd = RewardHooks(pr, codec, mode="ddpo")
    assert dd.train_lrm(state, x0, c0, c_gen, rng) == 0.0
    assert np.isfinite(dd.finetune(state, c_gen, rng))
    assert dd.last_info is not None
    frozen = RewardHooks(pr, codec, lrm=lrm, mode="lrm", fit_online=False)
    before = {k: p.data.copy() for k, p in lrm.named_parameters()}
    assert frozen.train_lrm(state, x0, c0, c_gen, rng) == 0.0
    assert np.isfinite(frozen.finetune(state, c_gen, rng))
    assert all(np.array_equal(before[k], p.data)
               for k, p in lrm.named_parameters())
    chunked = RewardHooks(pr, codec, lrm=lrm, mode="lrm", refit_every=2,
                          refit_iters=3, refit_batch=4)
    assert chunked.train_lrm(state, x0, c0, c_gen, rng) == 0.0
    assert all(np.array_equal(before[k], p.data)
               for k, p in lrm.named_parameters())
    assert np.isfinite(chunked.train_lrm(state, x0, c0, c_gen, rng))
    assert not all(np.array_equal(before[k], p.data)
                   for k, p in lrm.named_parameters())
    assert len(chunked._buf["real"]) == 16
    with pytest.raises(RewardError):
        RewardHooks(pr, codec, mode="lrm")
    with pytest.raises(RewardError):
        RewardHooks(pr, codec, mode="what")


def test_finetune_compare_report_shape(rng):
    ds = gen_gauss2d(0, 1024)
    codec = identity_codec(2)
    pr = make_reward("brightness")

    def make_state():
        return tiny_state(np.random.default_rng(3))

    report = finetune_compare(make_state, lambda: LatentRewardModel(
        2, np.random.default_rng(4)), pr, codec, ds, iters=4, seed=0,
        eval_every=2, eval_n=64)
    assert set(report) == {"lrm", "ddpo"}
    for mode in ("lrm", "ddpo"):
        rep = report[mode]
        assert rep["wall_time"] > 0
        assert len(rep["curve"]) == 2
        it, pred, true, w2 = rep["curve"][-1]
        assert it == 4 and np.isfinite(true) and np.isfinite(w2)
    assert np.isfinite(report["lrm"]["curve"][0][1])
    assert np.isnan(report["ddpo"]["curve"][0][1])
