"""Discrete-time variance-preserving diffusion.

Indexing convention: every per-step array has length ``T + 1`` and is indexed
directly by the step ``t``.  Index 0 is clean data (``alpha_bar[0] = 1``,
``beta[0] = sigma[0] = 0``).

A *score* is any callable ``score(x, t) -> array`` with the shape of ``x``;
``x`` may carry arbitrary leading batch dimensions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, ScheduleError, StepRangeError

Score = Callable[[np.ndarray, int], np.ndarray]

SIGMA_KINDS = ("posterior", "beta", "zero")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise rates and the coefficients derived from them."""

    beta: np.ndarray
    kind: str = "linear"
    sigma_kind: str = "posterior"
    alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ScheduleError("beta must be a 1-D array of length T + 1")
        if beta[0] != 0.0:
            raise ScheduleError("beta[0] must be 0 (clean-data slot)")
        b = beta[1:]
        if not np.all(np.isfinite(b)) or np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ScheduleError(f"unknown sigma_kind {self.sigma_kind!r}")
        beta = beta.copy()
        beta.setflags(write=False)
        alpha_bar = np.cumprod(1.0 - beta)
        alpha_bar.setflags(write=False)
        if self.sigma_kind == "posterior":
            var = np.zeros_like(beta)
            var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
            sigma = np.sqrt(var)
        elif self.sigma_kind == "beta":
            sigma = np.sqrt(beta)
        else:
            sigma = np.zeros_like(beta)
        sigma.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma", sigma)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def check_step(self, t, lo: int = 1) -> int:
        if int(t) != t or not lo <= t <= self.T:
            raise StepRangeError(f"step {t} outside [{lo}, {self.T}]")
        return int(t)

    def with_sigma(self, sigma_kind: str) -> "NoiseSchedule":
        return NoiseSchedule(self.beta, kind=self.kind, sigma_kind=sigma_kind)

    # -- constructors ---------------------------------------------------
    @classmethod
    def linear(cls, T: int = 1000, beta_start=None, beta_end=None, sigma_kind="posterior"):
        """Linear betas.  Endpoints default to 1e-4 and 0.02 rescaled by 1000/T,
        so shorter chains reach the same terminal noise level."""
        if T < 1:
            raise ScheduleError("T must be positive")
        scale = 1000.0 / T
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = 0.02 * scale if beta_end is None else beta_end
        beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        return cls(beta, kind="linear", sigma_kind=sigma_kind)

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999, sigma_kind="posterior"):
        if T < 1:
            raise ScheduleError("T must be positive")
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = np.concatenate([[0.0], np.minimum(1 - ab[1:] / ab[:-1], max_beta)])
        return cls(beta, kind="cosine", sigma_kind=sigma_kind)

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta[1:].tolist(), "kind": self.kind,
                "sigma_kind": self.sigma_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        beta = list(d["beta"])
        if len(beta) != int(d["T"]):
            raise ScheduleError(f"T={d['T']} but {len(beta)} betas given")
        if d.get("kind", "linear") not in ("linear", "cosine", "custom"):
            raise ScheduleError(f"unknown schedule kind {d['kind']!r}")
        return cls(np.array([0.0] + beta), kind=d.get("kind", "linear"),
                   sigma_kind=d.get("sigma_kind", "posterior"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(s))


def forward_marginal(x0, t, schedule: NoiseSchedule, noise):
    """Sample x_t given x_0 with explicit standard-normal ``noise``."""
    t = schedule.check_step(t)
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(noise)


def _checked_score(score: Score, xt, t):
    s = np.asarray(score(xt, t), dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericalError("score returned non-finite values", t=t, xt=np.asarray(xt))
    return s


def reverse_mean(xt, t, score: Score, schedule: NoiseSchedule):
    """Mean of the one-step reverse kernel, (x_t + beta_t * score) / sqrt(alpha_t).

    With an exact score this equals E[x_{t-1} | x_t].
    """
    t = schedule.check_step(t)
    s = _checked_score(score, xt, t)
    return (xt + schedule.beta[t] * s) / math.sqrt(1.0 - schedule.beta[t])


def reverse_step(xt, t, score: Score, schedule: NoiseSchedule, eps):
    return reverse_mean(xt, t, score, schedule) + schedule.sigma[t] * np.asarray(eps)


def tweedie_x0_hat(xt, t, score: Score, schedule: NoiseSchedule):
    """Plug-in posterior mean of x_0 from the score at x_t."""
    t = schedule.check_step(t, lo=0)
    ab = schedule.alpha_bar[t]
    if not ab > 0:
        raise ScheduleError(f"alpha_bar[{t}] = {ab} is not positive")
    if t == 0:
        return np.array(xt, dtype=np.float64)
    s = _checked_score(score, xt, t)
    return (xt + (1.0 - ab) * s) / math.sqrt(ab)


def ddim_step(xt, t, t_next, score: Score, schedule: NoiseSchedule, eta: float, eps):
    """Generalized DDIM update from step t to an earlier step t_next.

    ``eta = 1`` with ``t_next = t - 1`` reproduces the ancestral step with the
    posterior variance; ``eta = 0`` is deterministic.
    """
    t = schedule.check_step(t)
    if int(t_next) != t_next or not 0 <= t_next < t:
        raise StepRangeError(f"need 0 <= t_next < t, got t={t}, t_next={t_next}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[int(t_next)]
    x0_hat = tweedie_x0_hat(xt, t, score, schedule)
    eps_hat = (xt - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    sig = eta * math.sqrt((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s))
    direction = math.sqrt(max(1.0 - ab_s - sig**2, 0.0))
    out = math.sqrt(ab_s) * x0_hat + direction * eps_hat
    if sig > 0:
        out = out + sig * np.asarray(eps)
    return out


def sample_unconditional(score: Score, schedule: NoiseSchedule, x_T, rng: np.random.Generator):
    """Ancestral sampling from x_T down to x_0 (batched over leading dims)."""
    x = np.array(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, score, schedule, rng.standard_normal(x.shape))
    return x
