"""Lookahead Monte Carlo guidance for diffusion samplers, on analytic priors."""

from .diffusion import NoiseSchedule, ddim_step, forward_marginal, reverse_mean, reverse_step, tweedie_x0_hat
from .errors import NumericalError, ScheduleError, StepRangeError, UnsupportedPrimitiveError
from .guidance import GuidanceConfig, guided_step
from .prior import ExactDenoiser, GaussianMixture, PerturbedDenoiser, canonical_prior

__all__ = [
    "ExactDenoiser",
    "GaussianMixture",
    "GuidanceConfig",
    "NoiseSchedule",
    "NumericalError",
    "PerturbedDenoiser",
    "ScheduleError",
    "StepRangeError",
    "UnsupportedPrimitiveError",
    "canonical_prior",
    "ddim_step",
    "forward_marginal",
    "guided_step",
    "reverse_mean",
    "reverse_step",
    "tweedie_x0_hat",
]
