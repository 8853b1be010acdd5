"""Diversity, distance, and timing metrics."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewstep.metrics import (
    MetricError,
    SampleSet,
    diversity,
    mmd2,
    timing_report,
    vendi_score,
    wasserstein2,
)


def test_vendi_identical_samples_is_one():
    x = np.tile([[0.3, -1.2, 0.5]], (7, 1))
    assert abs(vendi_score(x) - 1.0) < 1e-9


def test_vendi_orthogonal_unit_vectors_is_n():
    for n in (2, 5, 8):
        assert abs(vendi_score(np.eye(n)) - n) < 1e-9


def test_vendi_mixed_basis_set_matches_hand_value():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    want = np.exp(-(2 / 3) * np.log(2 / 3) - (1 / 3) * np.log(1 / 3))
    got = vendi_score(x)
    assert abs(got - want) < 1e-9
    assert abs(got - 1.8898815748423097) < 1e-9


def test_vendi_permutation_invariant(rng):
    x = rng.standard_normal((20, 4))
    v1 = vendi_score(x)
    v2 = vendi_score(x[rng.permutation(20)])
    assert abs(v1 - v2) < 1e-9


def test_vendi_rbf_kernel_and_bounds(rng):
    x = rng.standard_normal((16, 3))
    v = vendi_score(x, kernel="rbf")
    assert 1.0 - 1e-9 <= v <= 16 + 1e-9
    # explicit sigma: huge bandwidth makes everything similar
    assert vendi_score(x, kernel="rbf", sigma=1e6) < 1.01
    with pytest.raises(MetricError):
        vendi_score(x, kernel="nope")


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 12), d=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_vendi_range_property(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    v = vendi_score(x)
    assert 1.0 - 1e-9 <= v <= n + 1e-9


def test_diversity_single_group_and_identical_groups(rng):
    g = rng.standard_normal((10, 2))
    assert abs(diversity([g]) - vendi_score(g)) < 1e-12
    same = np.tile([[1.0, 2.0]], (6, 1))
    assert abs(diversity([same, same.copy()]) - 1.0) < 1e-9
    # order invariance
    g2 = rng.standard_normal((10, 2))
    assert abs(diversity([g, g2]) - diversity([g2, g])) < 1e-12
    with pytest.raises(MetricError):
        diversity([g, g2[:5]])
    with pytest.raises(MetricError):
        diversity([])


def test_sampleset_wrapper(rng):
    s = SampleSet(rng.standard_normal((5, 3)), condition=2)
    assert vendi_score(s) >= 1.0
    with pytest.raises(MetricError):
        SampleSet(np.zeros((0, 3)))


def test_w2_identity_and_symmetry(rng):
    a = rng.standard_normal((128, 2))
    b = rng.standard_normal((128, 2))
    assert wasserstein2(a, a) < 1e-12
    assert abs(wasserstein2(a, b) - wasserstein2(b, a)) < 1e-12
    with pytest.raises(MetricError):
        wasserstein2(a, rng.standard_normal((10, 3)))


def test_w2_point_masses_exact():
    a = np.zeros((1, 2))
    b = np.array([[3.0, 4.0]])
    assert abs(wasserstein2(a, b) - 5.0) < 1e-9


def test_w2_translation_exact(rng):
    x = rng.standard_normal((200, 3))
    v = np.array([1.0, -2.0, 2.0])
    assert abs(wasserstein2(x, x + v) - 3.0) < 1e-9


def test_w2_1d_gaussian_mean_shift(rng):
    a = rng.standard_normal((10_000, 1))
    b = rng.standard_normal((10_000, 1)) + 1.5
    assert abs(wasserstein2(a, b) - 1.5) < 0.05


def test_w2_triangle_inequality_spot_check(rng):
    for _ in range(5):
        a = rng.standard_normal((64, 2))
        b = rng.standard_normal((64, 2)) + rng.standard_normal(2)
        c = rng.standard_normal((64, 2)) * 2.0
        assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-9


def test_w2_unequal_sizes(rng):
    a = rng.standard_normal((500, 1))
    b = rng.standard_normal((900, 1)) + 1.0
    assert abs(wasserstein2(a, b) - 1.0) < 0.15


def test_mmd2_separates_clusters(rng):
    a = rng.standard_normal((128, 2)) * 0.1
    b = rng.standard_normal((128, 2)) * 0.1 + 3.0
    # the unbiased estimator is allowed tiny negative values on matched sets
    near = abs(mmd2(a, a.copy()))
    far = mmd2(a, b)
    assert near < 0.02
    assert far > 0.1


def test_timing_report_monotone_and_ratios(rng):
    from fewstep.diffusion import DenoiserModel
    from fewstep.schedule import ddim_grid, vp_cosine_schedule

    sched = vp_cosine_schedule(1000)
    model = DenoiserModel(2, 9, rng, hidden=16, depth=1, time_dim=8, class_dim=4)
    grids = [ddim_grid(sched, 1), ddim_grid(sched, 4)]
    rows = timing_report(model, grids, sched, rng, np.zeros(16, dtype=int),
                         trials=3, batch=16)
    assert set(rows) == {1, 4}
    assert rows[1]["diffusion_mean"] < rows[4]["diffusion_mean"]
    assert rows[4]["diffusion_ratio"] == 1.0
    assert 0.0 < rows[1]["diffusion_ratio"] < 1.0
    assert rows[1]["end_to_end_mean"] >= rows[1]["diffusion_mean"]
