"""Evaluation metrics: Vendi diversity, sliced 2-Wasserstein, MMD, timing."""
import time
import warnings
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class SampleSet:
    """A homogeneous batch of samples, optionally tagged with a condition."""
    samples: np.ndarray
    condition: object = None
    feature_kind: str = "raw"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise MetricError("empty sample set")


def _as_matrix(x):
    s = x.samples if isinstance(x, SampleSet) else np.asarray(x, dtype=np.float64)
    if s.size == 0:
        raise MetricError("empty sample set")
    return s.reshape(len(s), -1)


def _rbf_sigma(x, y=None):
    """Median pairwise distance; falls back to 1.0 for degenerate sets."""
    pts = x if y is None else np.concatenate([x, y], axis=0)
    if len(pts) > 512:
        pts = pts[:: len(pts) // 512 + 1]
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    med = np.median(np.sqrt(d2[np.triu_indices(len(pts), 1)]))
    return float(med) if med > 0 else 1.0


def _kernel(x, kind, sigma):
    if kind == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        xs = x / np.maximum(norms, 1e-12)
        return xs @ xs.T
    if kind == "rbf":
        if sigma is None:
            sigma = _rbf_sigma(x)
        d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
        return np.exp(-d2 / (2.0 * sigma**2))
    raise MetricError(f"unknown kernel {kind!r}")


def vendi_score(samples, kernel="cosine", sigma=None):
    """Effective sample diversity: exp of the entropy of K/n eigenvalues.

    1 for n identical samples, n for n mutually orthogonal ones (cosine).
    Small negative eigenvalues from round-off are clamped with a warning.
    """
    x = _as_matrix(samples)
    n = len(x)
    k = _kernel(x, kernel, sigma) / n
    lam = np.linalg.eigvalsh(k)
    if lam.min() < -1e-8:
        warnings.warn(f"kernel not PSD (min eigenvalue {lam.min():.2e}); clamping")
    lam = np.clip(lam, 0.0, None)
    lam = lam[lam > 1e-15]
    return float(np.exp(-np.sum(lam * np.log(lam))))


def diversity(groups, kernel="cosine", sigma=None):
    """Mean Vendi score over same-sized sample groups."""
    groups = list(groups)
    if not groups:
        raise MetricError("diversity needs at least one group")
    sizes = {len(_as_matrix(g)) for g in groups}
    if len(sizes) != 1:
        raise MetricError("diversity groups must share one size")
    return float(np.mean([vendi_score(g, kernel, sigma) for g in groups]))


def _w2_1d(a, b):
    a = np.sort(a)
    b = np.sort(b)
    if len(a) != len(b):
        qs = np.linspace(0.0, 1.0, 1024)
        a = np.quantile(a, qs)
        b = np.quantile(b, qs)
    return float(np.mean((a - b) ** 2))


def _projection_frames(dim, n_proj, seed):
    """Rows of stacked random orthonormal frames.

    Complete frames make the sliced distance exact for point translations:
    the squared projections of any vector onto one frame sum to its norm.
    """
    rng = np.random.default_rng(seed)
    reps = -(-n_proj // dim)
    rows = []
    for _ in range(reps):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        rows.append(q.T)
    return np.concatenate(rows, axis=0)


def wasserstein2(a, b, n_proj=128, seed=0):
    """2-Wasserstein distance: exact in 1-D, sliced (and rescaled by the
    dimension) for d >= 2 so translations keep their Euclidean length."""
    xa = _as_matrix(a)
    xb = _as_matrix(b)
    if xa.shape[1] != xb.shape[1]:
        raise MetricError("sample sets live in different dimensions")
    d = xa.shape[1]
    if d == 1:
        return float(np.sqrt(_w2_1d(xa[:, 0], xb[:, 0])))
    proj = _projection_frames(d, n_proj, seed)
    pa = xa @ proj.T
    pb = xb @ proj.T
    w2s = [_w2_1d(pa[:, j], pb[:, j]) for j in range(proj.shape[0])]
    return float(np.sqrt(np.mean(w2s) * d))


def mmd2(a, b, sigma=None):
    """Unbiased squared maximum mean discrepancy with an rbf kernel."""
    xa = _as_matrix(a)
    xb = _as_matrix(b)
    if sigma is None:
        sigma = _rbf_sigma(xa, xb)

    def k(u, v):
        d2 = np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=2)
        return np.exp(-d2 / (2.0 * sigma**2))

    na, nb = len(xa), len(xb)
    kaa = k(xa, xa)
    kbb = k(xb, xb)
    kab = k(xa, xb)
    t_aa = (kaa.sum() - np.trace(kaa)) / (na * (na - 1)) if na > 1 else 0.0
    t_bb = (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1)) if nb > 1 else 0.0
    return float(t_aa + t_bb - 2.0 * kab.mean())


def timing_report(model, grids, sched, rng, classes, codec=None, trials=5,
                  w=0.0, batch=64):
    """Wall-clock cost per grid: diffusion-only and end-to-end with decoding.

    Returns one row per grid keyed by step count, with mean/std over trials
    and each mean as a fraction of the longest grid's (the many-step teacher
    configuration is the reference everything is compared against).
    """
    from .diffusion import ddim_sample

    classes = np.asarray(classes, dtype=np.int64)[:batch]
    rows = {}
    for grid in grids:
        n = len(grid.steps)
        diff_t, full_t = [], []
        ddim_sample(model, classes, grid, sched, rng, w=w)  # warm-up
        for _ in range(trials):
            t0 = time.perf_counter()
            x = ddim_sample(model, classes, grid, sched, rng, w=w)
            t1 = time.perf_counter()
            if codec is not None:
                codec.decode(x)
            t2 = time.perf_counter()
            diff_t.append(t1 - t0)
            full_t.append(t2 - t0)
        rows[n] = {
            "steps": n,
            "diffusion_mean": float(np.mean(diff_t)),
            "diffusion_std": float(np.std(diff_t)),
            "end_to_end_mean": float(np.mean(full_t)),
            "end_to_end_std": float(np.std(full_t)),
        }
    ref = max(rows)
    for n, row in rows.items():
        row["diffusion_ratio"] = row["diffusion_mean"] / rows[ref]["diffusion_mean"]
        row["end_to_end_ratio"] = row["end_to_end_mean"] / rows[ref]["end_to_end_mean"]
    return rows
