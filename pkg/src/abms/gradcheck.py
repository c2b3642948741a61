"""Finite-difference verification of the registered differentiable pipelines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conditions import (
    GaussianWell,
    LinearInverseTask,
    PropertyTarget,
    PseudoHuber,
    RadialProperty,
    circulant_matrix,
    squared_distance,
)
from .diffusion import NoiseSchedule
from .prior import CANONICAL_PRIORS, ExactDenoiser, PerturbedDenoiser, canonical_prior

FD_STEP = 1e-5


def _setting(rng):
    prior = canonical_prior(CANONICAL_PRIORS[int(rng.integers(len(CANONICAL_PRIORS)))], int(rng.integers(3)))
    T = 100
    schedule = NoiseSchedule.linear(T)
    t = int(rng.integers(2, T + 1))
    ab = schedule.alpha_bar[t]
    x0 = prior.sample(rng, 1)[0]
    xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * rng.standard_normal(prior.n)
    return prior, schedule, t, xt


def _condition(rng, n):
    kind = int(rng.integers(5))
    c = rng.standard_normal(n)
    if kind == 0:
        return squared_distance(c, float(rng.uniform(0.5, 2.0)))
    if kind == 1:
        A = circulant_matrix(n, [0.25, 0.5, 0.25]) if n > 2 else rng.standard_normal((1, n))
        return LinearInverseTask(A, A @ c)
    if kind == 2:
        return PseudoHuber(c, float(rng.uniform(0.3, 2.0)))
    if kind == 3:
        return GaussianWell(c, float(rng.uniform(0.8, 2.0)), float(rng.uniform(0.5, 2.0)))
    return PropertyTarget(RadialProperty(c), float(rng.uniform(0.5, 2.0)), 1.0)


def _quadratic(rng):
    n = int(rng.integers(1, 6))
    c = rng.standard_normal(n)
    return (lambda x: ad.scale(ad.sq_norm(ad.add(x, -c)), 0.5)), rng.standard_normal(n)


def _affine_chain(rng):
    n = int(rng.integers(1, 6))
    A = rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    w = rng.standard_normal(n)
    return (lambda x: ad.dot_const(ad.affine(ad.affine(x, A, b), A.T), w)), rng.standard_normal(n)


def _tweedie_loss(rng):
    prior, schedule, t, xt = _setting(rng)
    f = _condition(rng, prior.n)
    den = ExactDenoiser(prior, schedule)
    return (lambda x: ad.loss(ad.tweedie(x, t, den), f)), xt


def _perturbed_tweedie_loss(rng):
    prior, schedule, t, xt = _setting(rng)
    f = _condition(rng, prior.n)
    den = PerturbedDenoiser(ExactDenoiser(prior, schedule), 0.3, int(rng.integers(100)))
    return (lambda x: ad.loss(ad.tweedie(x, t, den), f)), xt


def _reverse_mean_loss(rng):
    prior, schedule, t, xt = _setting(rng)
    f = _condition(rng, prior.n)
    den = ExactDenoiser(prior, schedule)
    return (lambda x: ad.loss(ad.reverse_mean(x, t, den), f)), xt


def _lookahead(rng):
    prior, schedule, t, xt = _setting(rng)
    f = _condition(rng, prior.n)
    den = ExactDenoiser(prior, schedule)
    eps = rng.standard_normal((3, prior.n))
    return ad.lookahead_pipeline(t, eps, f, den), xt


def _lgd(rng):
    prior, schedule, t, xt = _setting(rng)
    f = _condition(rng, prior.n)
    den = ExactDenoiser(prior, schedule)
    eps = rng.standard_normal((3, prior.n))
    sig = float(rng.uniform(0.05, 1.0))
    return (lambda x: ad.mean(ad.loss(ad.expand_samples(ad.tweedie(x, t, den), eps, sig), f))), xt


def _lincomb(rng):
    prior, schedule, t, xt = _setting(rng)
    f, g = _condition(rng, prior.n), _condition(rng, prior.n)
    den = ExactDenoiser(prior, schedule)
    a, b = rng.standard_normal(2)

    def pipeline(x):
        x0 = ad.tweedie(x, t, den)
        return ad.lincomb([(a, ad.loss(x0, f)), (b, ad.loss(x0, g))])

    return pipeline, xt


#: name -> builder(rng) returning (pipeline, x)
PIPELINES = {
    "quadratic": _quadratic,
    "affine_chain": _affine_chain,
    "tweedie_loss": _tweedie_loss,
    "perturbed_tweedie_loss": _perturbed_tweedie_loss,
    "reverse_mean_loss": _reverse_mean_loss,
    "lookahead_M3": _lookahead,
    "lgd_mc_M3": _lgd,
    "lincomb": _lincomb,
}


def finite_difference(pipeline, x, h: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        up = float(pipeline(ad.variable(x + e)).value)
        down = float(pipeline(ad.variable(x - e)).value)
        g[i] = (up - down) / (2 * h)
    return g


@dataclass(frozen=True)
class GradCase:
    pipeline: str
    seed: int
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error < 1e-5


def relative_error(g, ref) -> float:
    return float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-8))


def run_gradcheck(n_cases: int = 200, seed: int = 0, names=None):
    """Cycle through the registry for ``n_cases`` random cases."""
    names = list(PIPELINES) if names is None else list(names)
    cases = []
    for i in range(n_cases):
        name = names[i % len(names)]
        rng = np.random.default_rng([seed, i])
        pipeline, x = PIPELINES[name](rng)
        g = ad.grad_of_pipeline(pipeline, x).grad
        cases.append(GradCase(name, i, relative_error(g, finite_difference(pipeline, x))))
    return cases
