"""Guidance strategies: DPS, LGD-MC, DSG and ABMS.

Each step function turns the unconditional reverse mean ``x_mean`` at step t
into a guided x_{t-1}.  All of them accept a batch of chains, ``xt`` of shape
(B, n) or a single point (n,), and return ``(x_new, GuidedStepRecord)``.
"""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericalError

METHODS = ("dps", "lgd_mc", "dsg", "abms")
SHAPES = ("cosine", "constant", "reversed-cosine")
ESTIMATORS = ("pathwise", "score_function")

_NORM_TOL = 1e-10


@dataclass
class GuidanceConfig:
    method: str = "abms"
    w_max: float = 0.1
    M: int = 3
    #: LGD-MC perturbation scale; None ties it to sqrt(1 - a_t) / sqrt(a_t)
    lgd_sigma: float | None = None
    #: None picks cosine for dsg/abms and constant for dps/lgd_mc
    schedule_shape: str | None = None
    #: ABMS ablation: False evaluates x0_hat at x_t instead of x_{t-1}
    lookahead: bool = True
    #: reuse the last guidance draw as the output noise instead of a fresh one
    reuse_noise: bool = False
    estimator: str = "pathwise"
    #: None = one vectorized tape over the M samples, k >= 1 = per-sample tapes on k threads
    workers: int | None = None

    def __post_init__(self):
        self.method = self.method.lower().replace("-", "_")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.w_max < 0:
            raise ValueError("w_max must be >= 0")
        if self.method in ("dsg", "abms") and self.w_max > 1:
            raise ValueError("spherical guidance needs w_max <= 1")
        if self.lgd_sigma is not None and self.lgd_sigma < 0:
            raise ValueError("lgd_sigma must be >= 0")
        if self.schedule_shape is not None and self.schedule_shape not in SHAPES:
            raise ValueError(f"unknown schedule_shape {self.schedule_shape!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @property
    def shape(self) -> str:
        if self.schedule_shape is not None:
            return self.schedule_shape
        return "cosine" if self.method in ("dsg", "abms") else "constant"

    def rate(self, t: int, T: int) -> float:
        return guidance_rate(t, T, self.w_max, self.shape)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown guidance keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "GuidanceConfig":
        return cls.from_dict(json.loads(s))


def cosine_rate(t, T, w_max):
    """Guidance rate (w_max / 2)(1 + cos(pi (1 - t / T))): w_max at t = T, 0 at t = 0."""
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return 0.5 * w_max * (1.0 + math.cos(math.pi * (1.0 - t / T)))


def guidance_rate(t, T, w_max, shape="cosine"):
    if shape == "cosine":
        return cosine_rate(t, T, w_max)
    if shape == "constant":
        return float(w_max)
    if shape == "reversed-cosine":
        return cosine_rate(T - t, T, w_max)
    raise ValueError(f"unknown schedule shape {shape!r}")


@dataclass
class GuidedStepRecord:
    t: int
    method: str
    g: np.ndarray
    g_prime: np.ndarray
    g_norm: np.ndarray
    omega: float
    losses: np.ndarray
    wall_time: float
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _dps_grad(xt, t, f, denoiser):
    """Value and x_t-gradient of f(x0_hat(x_t))."""
    return ad.grad_of_pipeline(lambda x: ad.loss(ad.tweedie(x, t, denoiser), f), xt)


def _rescale(g, omega, radius):
    """g' = omega * radius * g / ||g|| row-wise; rows with ||g|| = 0 get g' = 0."""
    norm = np.linalg.norm(g, axis=-1)
    fallback = norm == 0
    safe = np.where(fallback, 1.0, norm)
    g_prime = (omega * radius / safe)[..., None] * g
    g_prime = np.where(fallback[..., None], 0.0, g_prime)
    if omega * radius > 0:
        ratio = np.linalg.norm(g_prime, axis=-1)[~fallback] / (omega * radius)
        if ratio.size and np.max(np.abs(ratio - 1.0)) > _NORM_TOL:
            raise AssertionError(f"rescaled guidance norm off by {np.max(np.abs(ratio - 1.0)):.3e}")
    return g_prime, norm, fallback


@contextlib.contextmanager
def _at_step(t):
    """Attach the step index to numerical errors raised inside the gradient engine."""
    try:
        yield
    except NumericalError as exc:
        if "t" in exc.context:
            raise
        raise NumericalError(str(exc), t=t) from exc


def _check_finite(g, t):
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite guidance gradient", t=t)


def dps_step(xt, t, x_mean, f, config: GuidanceConfig, denoiser, eps):
    """x_mean + sigma_t eps - omega_t grad f(x0_hat(x_t)), without rescaling."""
    start = time.perf_counter()
    sched = denoiser.schedule
    omega = config.rate(t, sched.T)
    dg = _dps_grad(xt, t, f, denoiser)
    _check_finite(dg.grad, t)
    g = -dg.grad
    g_prime = omega * g
    out = x_mean + sched.sigma[t] * np.asarray(eps) + g_prime
    rec = GuidedStepRecord(t, "dps", g, g_prime, np.linalg.norm(g, axis=-1), omega,
                           np.asarray(dg.value)[..., None], time.perf_counter() - start,
                           np.zeros(np.shape(g)[:-1], dtype=bool))
    return out, rec


def lgd_mc_step(xt, t, x_mean, f, config: GuidanceConfig, denoiser, eps, eps_lgd):
    """DPS with f averaged over M Gaussian perturbations of x0_hat(x_t)."""
    start = time.perf_counter()
    sched = denoiser.schedule
    omega = config.rate(t, sched.T)
    ab = sched.alpha_bar[t]
    lgd_sigma = math.sqrt(1.0 - ab) / math.sqrt(ab) if config.lgd_sigma is None else config.lgd_sigma
    if lgd_sigma == 0:
        # every perturbed copy equals x0_hat, so the average is f(x0_hat) itself
        dg = _dps_grad(xt, t, f, denoiser)
        losses = np.asarray(dg.value)[..., None]
    else:
        cap = {}

        def pipeline(x):
            x0 = ad.tweedie(x, t, denoiser)
            per = ad.loss(ad.expand_samples(x0, eps_lgd, lgd_sigma), f)
            cap["losses"] = per.value
            return ad.mean(per, axis=-1)

        dg = ad.grad_of_pipeline(pipeline, xt)
        losses = cap["losses"]
    _check_finite(dg.grad, t)
    g = -dg.grad
    g_prime = omega * g
    out = x_mean + sched.sigma[t] * np.asarray(eps) + g_prime
    rec = GuidedStepRecord(t, "lgd_mc", g, g_prime, np.linalg.norm(g, axis=-1), omega, losses,
                           time.perf_counter() - start, np.zeros(np.shape(g)[:-1], dtype=bool))
    return out, rec


def dsg_step(xt, t, x_mean, f, config: GuidanceConfig, denoiser, eps):
    """DPS direction rescaled onto the sphere of radius omega_t sqrt(n) sigma_t."""
    start = time.perf_counter()
    sched = denoiser.schedule
    n = np.shape(xt)[-1]
    omega = config.rate(t, sched.T)
    sigma = sched.sigma[t]
    dg = _dps_grad(xt, t, f, denoiser)
    _check_finite(dg.grad, t)
    g = -dg.grad
    g_prime, norm, fallback = _rescale(g, omega, math.sqrt(n) * sigma)
    out = x_mean + g_prime + sigma * np.asarray(eps)
    rec = GuidedStepRecord(t, "dsg", g, g_prime, norm, omega, np.asarray(dg.value)[..., None],
                           time.perf_counter() - start, fallback)
    return out, rec


def abms_direction(xt, t, f, config: GuidanceConfig, denoiser, eps_guide) -> ad.DualGradient:
    """Gradient of the M-sample lookahead estimate f_hat w.r.t. x_t."""
    if not config.lookahead:
        return _dps_grad(xt, t, f, denoiser)
    if config.estimator == "score_function":
        return ad.score_function_grad_through_step(xt, t, eps_guide, f, denoiser)
    return ad.pathwise_grad_through_step(xt, t, eps_guide, f, denoiser, workers=config.workers)


def abms_step(xt, t, x_mean, f, config: GuidanceConfig, denoiser, eps_guide, eps_out):
    """One guided step: M lookahead samples, averaged loss, spherical rescaling.

    ``eps_guide`` holds the M frozen guidance draws, shape (..., M, n);
    ``eps_out`` is the independent output noise (ignored with ``reuse_noise``).
    """
    start = time.perf_counter()
    sched = denoiser.schedule
    sigma = sched.sigma[t]
    if not sigma > 0:
        raise ValueError(f"ABMS needs a stochastic kernel, sigma_{t} = {sigma}")
    eps_guide = np.asarray(eps_guide, dtype=np.float64)
    if eps_guide.shape[-2] != config.M:
        raise ValueError(f"expected {config.M} guidance draws, got {eps_guide.shape[-2]}")
    n = np.shape(xt)[-1]
    omega = config.rate(t, sched.T)
    dg = abms_direction(xt, t, f, config, denoiser, eps_guide)
    _check_finite(dg.grad, t)
    g = -dg.grad
    g_prime, norm, fallback = _rescale(g, omega, math.sqrt(n) * sigma)
    noise = eps_guide[..., -1, :] if config.reuse_noise else np.asarray(eps_out)
    out = x_mean + g_prime + sigma * noise
    losses = dg.samples if dg.samples is not None else np.asarray(dg.value)[..., None]
    rec = GuidedStepRecord(t, "abms", g, g_prime, norm, omega, losses,
                           time.perf_counter() - start, fallback)
    return out, rec


def noise_draws(config: GuidanceConfig | None, n: int):
    """Per-chain noise layout for one step: list of (name, shape) in draw order."""
    if config is None or config.w_max == 0:
        return [("out", (n,))]
    if config.method in ("abms", "lgd_mc"):
        return [("guide", (config.M, n)), ("out", (n,))]
    return [("out", (n,))]


def guided_step(xt, t, x_mean, f, config: GuidanceConfig, denoiser, noise: dict):
    """Dispatch on ``config.method``; ``noise`` maps draw names to arrays."""
    with _at_step(t):
        return _dispatch(xt, t, x_mean, f, config, denoiser, noise)


def _dispatch(xt, t, x_mean, f, config, denoiser, noise):
    m = config.method
    if m == "dps":
        return dps_step(xt, t, x_mean, f, config, denoiser, noise["out"])
    if m == "lgd_mc":
        return lgd_mc_step(xt, t, x_mean, f, config, denoiser, noise["out"], noise["guide"])
    if m == "dsg":
        return dsg_step(xt, t, x_mean, f, config, denoiser, noise["out"])
    return abms_step(xt, t, x_mean, f, config, denoiser, noise["guide"], noise["out"])
