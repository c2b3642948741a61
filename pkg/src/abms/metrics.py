"""Two-sample distribution distances used as the sample-quality score."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance


def _2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def energy_distance(x, y) -> float:
    """V-statistic 2 E|X - Y| - E|X - X'| - E|Y - Y'| (>= 0)."""
    x, y = _2d(x), _2d(y)
    dxy = cdist(x, y).mean()
    dxx = cdist(x, x).mean()
    dyy = cdist(y, y).mean()
    return max(2.0 * dxy - dxx - dyy, 0.0)


def energy_test(x, y, n_perm: int = 199, rng: np.random.Generator | None = None):
    """Permutation test of equal distributions.  Returns (statistic, p_value).

    All permutations share one pooled distance matrix; group sums are computed
    with a single matrix product over label indicators.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x, y = _2d(x), _2d(y)
    nx, ny = len(x), len(y)
    z = np.vstack([x, y])
    D = cdist(z, z)
    N = nx + ny
    labels = np.zeros((N, n_perm + 1))
    labels[:nx, 0] = 1.0
    for j in range(1, n_perm + 1):
        labels[rng.permutation(N)[:nx], j] = 1.0
    DL = D @ labels
    total = D.sum()
    sxx = np.einsum("ij,ij->j", labels, DL)
    row = DL.sum(axis=0)  # sum over all i in X, j anywhere
    sxy = row - sxx
    syy = total - sxx - 2.0 * sxy
    stat = 2.0 * sxy / (nx * ny) - sxx / nx**2 - syy / ny**2
    p = (1.0 + np.sum(stat[1:] >= stat[0])) / (n_perm + 1.0)
    return float(stat[0]), float(p)


def sliced_wasserstein(x, y, n_proj: int = 64, rng: np.random.Generator | None = None) -> float:
    """Mean 1-Wasserstein distance over random unit projections."""
    rng = np.random.default_rng(0) if rng is None else rng
    x, y = _2d(x), _2d(y)
    d = x.shape[1]
    if d == 1:
        return float(wasserstein_distance(x[:, 0], y[:, 0]))
    dirs = rng.standard_normal((n_proj, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = x @ dirs.T, y @ dirs.T
    return float(np.mean([wasserstein_distance(px[:, j], py[:, j]) for j in range(n_proj)]))


def envelope_threshold(prior, mass: float = 0.999, n: int = 20000, seed: int = 0) -> float:
    """Log-density level enclosing ``mass`` of the prior (Monte Carlo quantile)."""
    xs = prior.sample(np.random.default_rng([0xE1, seed]), n)
    return float(np.quantile(prior.log_prob(xs), 1.0 - mass))


def envelope_fraction(prior, x, threshold: float) -> float:
    """Fraction of points inside the prior's high-mass envelope (validity rate)."""
    return float(np.mean(prior.log_prob(x) >= threshold))
