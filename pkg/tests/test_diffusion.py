"""Denoiser model, parameterization conversions, guidance, and sampling."""
import numpy as np
import pytest

import fewstep.engine as E
from fewstep.engine import Tensor
from fewstep.diffusion import (
    DenoiserModel,
    DiffusionError,
    apply_cfg,
    ddim_sample,
    denoise_span,
    denoise_step,
    fit_denoiser,
    guided_x0,
    loss_conjugate_v,
    loss_standard_v,
    time_features,
    tweedie_x0,
    x_from_v,
)
from fewstep.schedule import TimeGrid, ddim_grid, forward_diffuse, vp_cosine_schedule

from conftest import fd_grad, rel_err


SCHED = vp_cosine_schedule(T=1000)


def small_model(rng, dim=2, param_kind="conjugate-v", hidden=16, depth=2):
    return DenoiserModel(dim, num_classes=3, rng=rng, param_kind=param_kind,
                         hidden=hidden, depth=depth, time_dim=8, class_dim=4)


class StubX0Model:
    """Interface double whose x0 prediction is a fixed constant."""

    param_kind = "x-pred"
    num_classes = 3
    null_class = 2

    def __init__(self, x0):
        self._x0 = np.asarray(x0, dtype=np.float64)
        self.latent_dim = self._x0.shape[-1]

    def predict(self, x, t, c, T):
        x = E.as_tensor(x)
        rows = np.broadcast_to(self._x0, (x.shape[0], self.latent_dim))
        return x * 0.0 + Tensor(rows.copy())

    def to_x0(self, x_t, pred, t, sched):
        return pred


def test_x_from_v_inverts_forward_process(rng):
    x0 = rng.standard_normal((6, 2))
    eps = rng.standard_normal((6, 2))
    t = np.array([1, 50, 250, 500, 900, 1000])
    x_t = forward_diffuse(x0, t, eps, SCHED)
    v = x0 - eps
    rec = x_from_v(x_t, v, t, SCHED)
    assert np.max(np.abs(rec - x0)) < 1e-12


def test_tweedie_inverts_forward_process(rng):
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    t = np.array([1, 100, 400, 700, 999])
    x_t = forward_diffuse(x0, t, eps, SCHED)
    rec = tweedie_x0(x_t, eps, t, SCHED)
    assert np.max(np.abs(rec - x0)) < 1e-10


def test_x_from_v_tensor_path_matches_ndarray(rng):
    x_t = rng.standard_normal((4, 2))
    v = rng.standard_normal((4, 2))
    t = np.array([10, 20, 30, 40])
    want = x_from_v(x_t, v, t, SCHED)
    got = x_from_v(Tensor(x_t), Tensor(v), t, SCHED)
    assert np.max(np.abs(got.data - want)) < 1e-14


def test_time_features_shape_and_determinism():
    t = np.array([0, 1, 500, 1000])
    f1 = time_features(t, 1000, dim=16)
    f2 = time_features(t, 1000, dim=16)
    assert f1.shape == (4, 16)
    assert np.array_equal(f1, f2)
    # distinct timesteps produce distinct embeddings
    assert np.linalg.norm(f1[0] - f1[2]) > 1e-3
    with pytest.raises(ValueError):
        time_features(t, 1000, dim=7)


def test_model_predicts_finite_and_batched(rng):
    m = small_model(rng)
    x = Tensor(rng.standard_normal((5, 2)))
    out = m.predict(x, 500, np.zeros(5, dtype=int), SCHED.T)
    assert out.shape == (5, 2)
    assert np.all(np.isfinite(out.data))
    # c=None routes to the null class
    out_null = m.predict(x, 500, None, SCHED.T)
    out_explicit = m.predict(x, 500, np.full(5, m.null_class), SCHED.T)
    assert np.max(np.abs(out_null.data - out_explicit.data)) < 1e-14


def test_cfg_weight_zero_is_plain_conditional(rng):
    m = small_model(rng)
    x = Tensor(rng.standard_normal((4, 2)))
    c = np.array([0, 1, 0, 1])
    got = apply_cfg(m, x, 300, c, 0.0, SCHED.T)
    want = m.predict(x, 300, c, SCHED.T)
    assert np.max(np.abs(got.data - want.data)) < 1e-14


def test_cfg_matches_two_call_combination(rng):
    m = small_model(rng)
    x = Tensor(rng.standard_normal((4, 2)))
    c = np.array([0, 1, 1, 0])
    w = 7.5
    got = apply_cfg(m, x, 200, c, w, SCHED.T)
    cond = m.predict(x, 200, c, SCHED.T).data
    null = m.predict(x, 200, None, SCHED.T).data
    want = cond * (1.0 + w) - null * w
    assert np.max(np.abs(got.data - want)) < 1e-10


def test_cfg_on_null_class_is_guidance_free(rng):
    m = small_model(rng)
    x = Tensor(rng.standard_normal((3, 2)))
    c = np.full(3, m.null_class)
    got = apply_cfg(m, x, 400, c, 5.0, SCHED.T)
    want = m.predict(x, 400, c, SCHED.T)
    assert np.max(np.abs(got.data - want.data)) < 1e-10


def test_guided_x0_rejects_non_finite(rng):
    m = small_model(rng)
    # poison one weight so the forward pass emits NaN
    m.trunk.layers[0].w.data[0, 0] = np.nan
    x = Tensor(rng.standard_normal((2, 2)))
    with pytest.raises(DiffusionError, match="non-finite"):
        guided_x0(m, x, 500, np.array([0, 1]), 0.0, SCHED)


def test_conjugate_v_loss_matches_manual(rng):
    m = small_model(rng)
    x0 = rng.standard_normal((8, 2))
    eps = rng.standard_normal((8, 2))
    t = rng.integers(1, 1000, size=8)
    c = rng.integers(0, 2, size=8)
    loss = loss_conjugate_v(m, x0, c, t, eps, SCHED)
    x_t = forward_diffuse(x0, t, eps, SCHED)
    pred = m.predict(Tensor(x_t), t, c, SCHED.T).data
    want = np.mean((pred - (x0 - eps)) ** 2)
    assert abs(loss.item() - want) < 1e-12
    assert loss.item() >= 0.0


def test_conjugate_v_loss_rejects_x_pred_head(rng):
    m = small_model(rng, param_kind="x-pred")
    x0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    with pytest.raises(DiffusionError):
        loss_conjugate_v(m, x0, np.zeros(4, dtype=int), np.full(4, 500), eps, SCHED)


def test_standard_v_loss_matches_manual(rng):
    m = small_model(rng)
    x0 = rng.standard_normal((6, 2))
    eps = rng.standard_normal((6, 2))
    t = rng.integers(1, 1000, size=6)
    c = rng.integers(0, 2, size=6)
    loss = loss_standard_v(m, x0, c, t, eps, SCHED)
    x_t = forward_diffuse(x0, t, eps, SCHED)
    a = SCHED.a[t].reshape(-1, 1)
    b = SCHED.b[t].reshape(-1, 1)
    pred = m.predict(Tensor(x_t), t, c, SCHED.T).data
    want = np.mean((pred - (a * eps - b * x0)) ** 2)
    assert abs(loss.item() - want) < 1e-12


def test_conjugate_v_loss_gradient_matches_finite_differences(rng):
    m = DenoiserModel(2, num_classes=3, rng=rng, hidden=4, depth=1,
                      time_dim=4, class_dim=2)
    x0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    t = np.array([100, 500, 900])
    c = np.array([0, 1, 0])

    def loss_fn():
        return loss_conjugate_v(m, x0, c, t, eps, SCHED).item()

    m.zero_grad()
    loss_conjugate_v(m, x0, c, t, eps, SCHED).backward()
    for name, p in m.named_parameters():
        num = fd_grad(loss_fn, [p], h=1e-6)[0]
        assert rel_err(p.grad, num) < 1e-5, name


def test_denoise_step_deterministic_algebra(rng):
    x0 = np.array([0.3, -0.8])
    stub = StubX0Model(x0)
    t, t_prev = 500, 250
    eps = rng.standard_normal((4, 2))
    x_t = Tensor(SCHED.a[t] * x0 + SCHED.b[t] * eps)
    out = denoise_step(stub, x_t, t, t_prev, np.zeros(4, dtype=int), SCHED)
    # exact eps recovery means the jump lands on a_prev x0 + b_prev eps
    want = SCHED.a[t_prev] * x0 + SCHED.b[t_prev] * eps
    assert np.max(np.abs(out.data - want)) < 1e-10


def test_denoise_step_final_jump_returns_x0_exactly(rng):
    x0 = np.array([1.5, 2.5])
    stub = StubX0Model(x0)
    x_t = Tensor(rng.standard_normal((3, 2)))
    out = denoise_step(stub, x_t, 249, 0, np.zeros(3, dtype=int), SCHED)
    assert np.max(np.abs(out.data - x0)) < 1e-12
    # stochastic flag makes no difference on the final jump
    out2 = denoise_step(stub, x_t, 249, 0, np.zeros(3, dtype=int), SCHED,
                        stochastic=True, rng=rng)
    assert np.max(np.abs(out2.data - x0)) < 1e-12


def test_stochastic_step_preserves_forward_marginal(rng):
    # With exact x0 prediction, one stochastic jump from the forward marginal
    # at t must land on the forward marginal at t_prev.
    x0 = np.array([0.0, 0.0])
    stub = StubX0Model(x0)
    t, t_prev = 749, 499
    n = 40000
    eps = rng.standard_normal((n, 2))
    x_t = Tensor(SCHED.a[t] * x0 + SCHED.b[t] * eps)
    out = denoise_step(stub, x_t, t, t_prev, np.zeros(n, dtype=int), SCHED,
                       stochastic=True, rng=rng).data
    want_std = np.sqrt(1.0 - SCHED.alpha_bar[t_prev])
    assert abs(out.mean()) < 0.02
    assert abs(out.std() - want_std) < 0.02


def test_stochastic_step_requires_rng(rng):
    stub = StubX0Model(np.zeros(2))
    x_t = Tensor(rng.standard_normal((2, 2)))
    with pytest.raises(DiffusionError, match="rng"):
        denoise_step(stub, x_t, 499, 249, np.zeros(2, dtype=int), SCHED,
                     stochastic=True)


def test_denoise_span_walks_grid_and_validates_indices(rng):
    stub = StubX0Model(np.array([1.0, -1.0]))
    grid = ddim_grid(SCHED, 4)
    x = Tensor(rng.standard_normal((2, 2)))
    out = denoise_span(stub, x, grid, 3, 0, np.zeros(2, dtype=int), SCHED)
    assert out.shape == (2, 2)
    assert np.all(np.isfinite(out.data))
    with pytest.raises(DiffusionError):
        denoise_span(stub, x, grid, 0, 3, np.zeros(2, dtype=int), SCHED)


def test_ddim_sample_untrained_model_is_finite(rng):
    m = small_model(rng)
    for n in (1, 4):
        grid = ddim_grid(SCHED, n)
        out = ddim_sample(m, np.array([0, 1, 0]), grid, SCHED, rng)
        assert out.shape == (3, 2)
        assert np.all(np.isfinite(out))
        assert isinstance(out, np.ndarray)


def test_ddim_sample_single_step_is_one_model_call(rng):
    # On a one-point grid the sampler is exactly predict_x0 at the top step.
    m = small_model(rng)
    grid = TimeGrid(np.array([999]))
    rng_a = np.random.default_rng(11)
    rng_b = np.random.default_rng(11)
    out = ddim_sample(m, np.array([0, 1]), grid, SCHED, rng_a)
    x = Tensor(rng_b.standard_normal((2, 2)))
    want = m.predict_x0(x, 999, np.array([0, 1]), SCHED)
    assert np.max(np.abs(out - want.data)) < 1e-12


def test_fit_denoiser_reduces_loss(rng):
    m = small_model(rng, hidden=32, depth=2)

    def batch(r, n):
        c = r.integers(0, 2, size=n)
        mu = np.where(c[:, None] == 0, -2.0, 2.0)
        return mu + 0.1 * r.standard_normal((n, 2)), c

    losses = fit_denoiser(m, batch, SCHED, iters=250, rng=rng, lr=3e-3, batch=32)
    head = float(np.mean(losses[:25]))
    tail = float(np.mean(losses[-25:]))
    assert tail < 0.6 * head
