"""Gaussian-mixture priors with exact noised marginals, scores and posteriors.

Under the VP forward process a component N(m, S) at noise level ``a = alpha_bar``
becomes N(sqrt(a) m, a S + (1 - a) I), and p(x_0 | x_t) is again a mixture whose
per-component covariances do not depend on x_t.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp, softmax

from .diffusion import NoiseSchedule
from .errors import NumericalError

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class _Noised:
    """Factorized quantities for one noise level, computed once and cached."""

    alpha_bar: float
    means: np.ndarray  # (K, n) sqrt(a) * m_k
    prec: np.ndarray  # (K, n, n) inverse marginal covariance
    logdet: np.ndarray  # (K,)
    gain: np.ndarray  # (K, n, n) sqrt(a) * S_k * prec_k
    post_cov: np.ndarray  # (K, n, n)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        K, n = mu.shape
        if w.shape != (K,) or cov.shape != (K, n, n):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("means and covariances must be finite")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        for name, arr in (("weights", w), ("means", mu), ("covs", cov)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        chol.setflags(write=False)
        self._cache["chol"] = chol

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def n(self) -> int:
        return self.means.shape[1]

    # -- basic moments and sampling -------------------------------------
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        m = self.mean()
        second = np.einsum("k,kij->ij", self.weights, self.covs + np.einsum("ki,kj->kij", self.means, self.means))
        return second - np.outer(m, m)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k = rng.choice(self.K, size=size, p=self.weights)
        z = rng.standard_normal((size, self.n))
        return self.means[k] + np.einsum("sij,sj->si", self._cache["chol"][k], z)

    def log_prob(self, x, alpha_bar: float = 1.0) -> np.ndarray:
        return logsumexp(self._component_log_prob(x, self._noised(alpha_bar)), axis=-1)

    # -- noise-level machinery ------------------------------------------
    def _noised(self, alpha_bar: float) -> _Noised:
        key = float(alpha_bar)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a = key
        eye = np.eye(self.n)
        S = a * self.covs + (1.0 - a) * eye
        try:
            chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("noised covariance is not positive definite", alpha_bar=a) from exc
        inv_chol = np.linalg.inv(chol)
        prec = np.einsum("kji,kjl->kil", inv_chol, inv_chol)
        prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1)
        if a == 1.0:
            gain = np.broadcast_to(eye, S.shape).copy()
            post_cov = np.zeros_like(S)
        else:
            gain = math.sqrt(a) * self.covs @ prec
            post_cov = self.covs - math.sqrt(a) * gain @ self.covs
            post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, 1, 2))
        out = _Noised(a, math.sqrt(a) * self.means, prec, logdet, gain, post_cov)
        for arr in (out.means, out.prec, out.logdet, out.gain, out.post_cov):
            arr.setflags(write=False)
        self._cache[key] = out
        return out

    def noised(self, alpha_bar: float) -> "GaussianMixture":
        a = float(alpha_bar)
        covs = a * self.covs + (1.0 - a) * np.eye(self.n)
        return GaussianMixture(self.weights, math.sqrt(a) * self.means, 0.5 * (covs + np.swapaxes(covs, 1, 2)))

    def _component_log_prob(self, x, nz: _Noised):
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - nz.means
        sol = np.einsum("kij,...kj->...ki", nz.prec, diff)
        maha = np.einsum("...ki,...ki->...k", diff, sol)
        return np.log(self.weights) - 0.5 * (maha + nz.logdet + self.n * _LOG2PI)

    def _responsibilities(self, x, nz: _Noised):
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - nz.means
        sol = np.einsum("kij,...kj->...ki", nz.prec, diff)
        logp = np.log(self.weights) - 0.5 * (np.einsum("...ki,...ki->...k", diff, sol) + nz.logdet)
        top = np.max(logp, axis=-1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise NumericalError("all component responsibilities underflowed", alpha_bar=nz.alpha_bar)
        return softmax(logp, axis=-1), sol

    # -- exact score and its derivative ---------------------------------
    def score(self, x, alpha_bar: float) -> np.ndarray:
        r, sol = self._responsibilities(x, self._noised(alpha_bar))
        return -np.einsum("...k,...ki->...i", r, sol)

    def score_hvp(self, x, alpha_bar: float, v) -> np.ndarray:
        """Hessian of log p_t at x applied to v (the Jacobian of the score).

        H = -sum_k r_k P_k + sum_k r_k g_k g_k^T - s s^T with g_k = -P_k (x - m_k).
        """
        nz = self._noised(alpha_bar)
        r, sol = self._responsibilities(x, nz)
        v = np.asarray(v, dtype=np.float64)
        g = -sol
        s = np.einsum("...k,...ki->...i", r, g)
        pv = np.einsum("kij,...j->...ki", nz.prec, v)
        gv = np.einsum("...ki,...i->...k", g, v)
        out = -np.einsum("...k,...ki->...i", r, pv)
        out = out + np.einsum("...k,...ki->...i", r * gv, g)
        return out - s * np.einsum("...i,...i->...", s, v)[..., None]

    def score_hessian(self, x, alpha_bar: float) -> np.ndarray:
        eye = np.eye(self.n)
        x = np.asarray(x, dtype=np.float64)
        cols = [self.score_hvp(x, alpha_bar, np.broadcast_to(eye[i], x.shape)) for i in range(self.n)]
        return np.stack(cols, axis=-1)

    # -- exact posterior --------------------------------------------------
    def posterior(self, x, alpha_bar: float) -> "PosteriorGMM":
        nz = self._noised(alpha_bar)
        r, _ = self._responsibilities(x, nz)
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - nz.means
        means = self.means + np.einsum("kij,...kj->...ki", nz.gain, diff)
        return PosteriorGMM(r, means, nz.post_cov)

    # -- (de)serialization ------------------------------------------------
    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        missing = {"weights", "means", "covs"} - set(d)
        if missing:
            raise ValueError(f"GMM file missing keys: {sorted(missing)}")
        return cls(np.array(d["weights"], float), np.array(d["means"], float), np.array(d["covs"], float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PosteriorGMM:
    """p(x_0 | x_t) as a mixture.  ``weights``/``means`` may carry batch dims;
    ``covs`` has shape (K, n, n) because it does not depend on x_t."""

    weights: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K, n)
    covs: np.ndarray  # (K, n, n)

    def mean(self) -> np.ndarray:
        return np.einsum("...k,...ki->...i", self.weights, self.means)

    def cov(self) -> np.ndarray:
        m = self.mean()
        within = np.einsum("...k,kij->...ij", self.weights, self.covs)
        second = np.einsum("...k,...ki,...kj->...ij", self.weights, self.means, self.means)
        return within + second - m[..., :, None] * m[..., None, :]

    def cov_trace(self) -> np.ndarray:
        """Total-covariance trace: within-component plus between-component parts."""
        m = self.mean()
        within = self.weights @ np.trace(self.covs, axis1=1, axis2=2)
        between = np.einsum("...k,...ki,...ki->...", self.weights, self.means, self.means) - np.einsum("...i,...i->...", m, m)
        return np.maximum(within + between, 0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.weights.ndim != 1:
            raise ValueError("sample() needs an unbatched posterior")
        K, n = self.means.shape
        k = rng.choice(K, size=size, p=self.weights)
        z = rng.standard_normal((size, n))
        # eigh tolerates the rank-deficient covariances of the no-noise limit
        w, V = np.linalg.eigh(self.covs)
        root = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
        return self.means[k] + np.einsum("sij,sj->si", root[k], z)


# -- module-level operations -------------------------------------------------

def noised_marginal(prior: GaussianMixture, t: int, schedule: NoiseSchedule) -> GaussianMixture:
    t = schedule.check_step(t, lo=0)
    return prior.noised(schedule.alpha_bar[t])


def exact_score(prior: GaussianMixture, xt, t: int, schedule: NoiseSchedule) -> np.ndarray:
    t = schedule.check_step(t, lo=0)
    return prior.score(xt, schedule.alpha_bar[t])


def exact_posterior(prior: GaussianMixture, xt, t: int, schedule: NoiseSchedule) -> PosteriorGMM:
    t = schedule.check_step(t, lo=0)
    return prior.posterior(xt, schedule.alpha_bar[t])


def posterior_cov_trace(prior: GaussianMixture, xt, t: int, schedule: NoiseSchedule) -> np.ndarray:
    return exact_posterior(prior, xt, t, schedule).cov_trace()


@dataclass(frozen=True)
class Expectation:
    value: float
    stderr: float
    n_samples: int
    closed_form: float | None = None


def closed_form_expectation(post: PosteriorGMM, f):
    """E[f(x_0)] for f exposing ``quadratic_form() -> (Q, b, c)``; None otherwise."""
    qf = getattr(f, "quadratic_form", None)
    form = qf() if qf is not None else None
    if form is None:
        return None
    Q = form[0]
    per_comp = f(post.means) + np.einsum("ij,kji->k", Q, post.covs)
    return np.einsum("...k,...k->...", post.weights, per_comp)


def oracle_conditional_expectation(prior: GaussianMixture, xt, t: int, schedule: NoiseSchedule, f,
                                   N: int, rng: np.random.Generator) -> Expectation:
    """Monte Carlo E[f(x_0) | x_t] from i.i.d. exact posterior draws, plus the
    closed form when ``f`` is quadratic."""
    post = exact_posterior(prior, np.asarray(xt, dtype=np.float64), t, schedule)
    xs = post.sample(rng, N)
    vals = np.asarray(f(xs), dtype=np.float64)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericalError("f is non-finite on a posterior sample", index=i, sample=xs[i])
    stderr = float(vals.std(ddof=1) / math.sqrt(N)) if N > 1 else float("nan")
    closed = closed_form_expectation(post, f)
    return Expectation(float(vals.mean()), stderr, N, None if closed is None else float(closed))


def gauss_hermite_expectation(post: PosteriorGMM, f, order: int = 24) -> float:
    """Tensor-product Gauss-Hermite cubature of E[f(x_0)] for small n (<= 3)."""
    K, n = post.means.shape
    if n > 3:
        raise ValueError("tensor-product cubature limited to n <= 3")
    z, w = hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * n), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.prod(np.meshgrid(*([w] * n), indexing="ij"), axis=0).ravel()
    evals, V = np.linalg.eigh(post.covs)
    root = V * np.sqrt(np.clip(evals, 0.0, None))[:, None, :]
    total = 0.0
    for k in range(K):
        pts = post.means[k] + nodes @ root[k].T
        total += post.weights[k] * float(wts @ np.asarray(f(pts)))
    return total


def condition_linear_gaussian(prior: GaussianMixture, A, y, noise_var: float) -> GaussianMixture:
    """Exact p(x_0 | y) for y = A x_0 + N(0, noise_var I): a reweighted mixture."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    logw, means, covs = [], [], []
    for k in range(prior.K):
        m, S = prior.means[k], prior.covs[k]
        Sy = A @ S @ A.T + noise_var * np.eye(A.shape[0])
        cho = np.linalg.cholesky(Sy)
        resid = y - A @ m
        sol = np.linalg.solve(Sy, resid)
        gain = S @ A.T @ np.linalg.inv(Sy)
        c = S - gain @ A @ S
        means.append(m + gain @ resid)
        covs.append(0.5 * (c + c.T))
        logdet = 2.0 * np.log(np.diag(cho)).sum()
        logw.append(math.log(prior.weights[k]) - 0.5 * (resid @ sol + logdet))
    w = softmax(np.array(logw))
    w = w / w.sum()
    return GaussianMixture(w, np.array(means), np.array(covs))


class ExactDenoiser:
    """Score, Tweedie map and score-Jacobian products of a prior on a schedule."""

    def __init__(self, prior: GaussianMixture, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule

    @property
    def n(self) -> int:
        return self.prior.n

    def score(self, x, t: int) -> np.ndarray:
        return self.prior.score(x, self.schedule.alpha_bar[t])

    def __call__(self, x, t: int) -> np.ndarray:
        return self.score(x, t)

    def score_vjp(self, x, t: int, v) -> np.ndarray:
        # the Hessian of a log density is symmetric, so VJP == HVP
        return self.prior.score_hvp(x, self.schedule.alpha_bar[t], v)

    def posterior_mean(self, x, t: int) -> np.ndarray:
        return self.prior.posterior(x, self.schedule.alpha_bar[t]).mean()


class PerturbedDenoiser:
    """Exact score plus a bounded smooth field ``magnitude * tanh(W x + b)``.

    The induced reconstruction error of the Tweedie map is at most
    ``magnitude * sqrt(n) * (1 - a) / sqrt(a)``, shrinking as t decreases.
    """

    def __init__(self, base: ExactDenoiser, magnitude: float, seed: int = 0):
        self.base = base
        self.prior = base.prior
        self.schedule = base.schedule
        self.magnitude = float(magnitude)
        rng = np.random.default_rng(seed)
        n = base.n
        self.W = rng.standard_normal((n, n)) / math.sqrt(n)
        self.b = rng.standard_normal(n)

    @property
    def n(self) -> int:
        return self.base.n

    def score(self, x, t: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.base.score(x, t) + self.magnitude * np.tanh(x @ self.W.T + self.b)

    def __call__(self, x, t: int) -> np.ndarray:
        return self.score(x, t)

    def score_vjp(self, x, t: int, v) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = 1.0 - np.tanh(x @ self.W.T + self.b) ** 2
        return self.base.score_vjp(x, t, v) + self.magnitude * (d * v) @ self.W

    def posterior_mean(self, x, t: int) -> np.ndarray:
        return self.base.posterior_mean(x, t)


# -- canonical priors --------------------------------------------------------

def _random_spd(rng, n, lo, hi):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = rng.uniform(lo, hi, size=n)
    S = (Q * eig) @ Q.T
    return 0.5 * (S + S.T)


def _normalized(w):
    w = np.asarray(w, dtype=np.float64)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return w


def canonical_prior(name: str, seed: int = 0) -> GaussianMixture:
    """The fixed test priors: ``gmm2d_2``, ``ring2d_8`` and ``gmm16d_4``."""
    rng = np.random.default_rng([0xAB, seed])
    if name == "gmm2d_2":
        theta = rng.uniform(0, math.pi)
        u = np.array([math.cos(theta), math.sin(theta)])
        means = np.stack([1.5 * u, -1.5 * u])
        covs = np.stack([_random_spd(rng, 2, 0.05, 0.3) for _ in range(2)])
        w0 = rng.uniform(0.35, 0.65)
        return GaussianMixture(np.array([w0, 1.0 - w0]), means, covs)
    if name == "ring2d_8":
        phase = rng.uniform(0, 2 * math.pi / 8)
        ang = phase + 2 * math.pi * np.arange(8) / 8
        means = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        covs = np.stack([0.04 * np.eye(2)] * 8)
        w = _normalized(rng.uniform(0.8, 1.2, size=8))
        return GaussianMixture(w, means, covs)
    if name == "gmm16d_4":
        means = rng.normal(0.0, 1.0, size=(4, 16))
        covs = np.stack([_random_spd(rng, 16, 0.05, 0.4) for _ in range(4)])
        w = _normalized(rng.uniform(0.7, 1.3, size=4))
        return GaussianMixture(w, means, covs)
    raise KeyError(f"unknown canonical prior {name!r}")


CANONICAL_PRIORS = ("gmm2d_2", "ring2d_8", "gmm16d_4")
CANONICAL_SEEDS = (0, 1, 2)
