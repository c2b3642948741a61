import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abms import lab
from abms.conditions import GaussianWell, LinearLoss, PseudoHuber, QuadraticLoss, squared_distance
from abms.diffusion import NoiseSchedule, tweedie_x0_hat
from abms.errors import NumericalError
from abms.metrics import energy_test
from abms.prior import ExactDenoiser, PerturbedDenoiser


def _gaussian_post_cov(S, ab):
    # x_t = sqrt(ab) x0 + sqrt(1 - ab) z  =>  Cov[x0 | x_t] = (S^-1 + ab / (1 - ab) I)^-1
    return np.linalg.inv(np.linalg.inv(S) + ab / (1 - ab) * np.eye(len(S)))


def test_dps_error_vanishes_for_linear_conditions(gmm2d, sched100):
    f = LinearLoss(np.array([0.3, -1.2]), 0.5)
    xt = lab.sample_marginal(gmm2d, 40, sched100, np.random.default_rng(0), 5)
    for x in xt:
        assert lab.dps_error(x, 40, f, gmm2d, sched100).value < 1e-12


def test_dps_error_of_squared_norm_is_posterior_trace(gmm2d, sched100):
    f = squared_distance(np.zeros(2))
    x = np.array([0.4, 1.1])
    tr = float(gmm2d.posterior(x, sched100.alpha_bar[60]).cov_trace())
    assert lab.dps_error(x, 60, f, gmm2d, sched100).value == pytest.approx(tr, rel=1e-10)


def test_abms_error_linear_is_zero(gmm2d, sched100):
    f = LinearLoss(np.array([1.0, 2.0]))
    res = lab.abms_error(np.array([0.5, 0.5]), 50, f, 4, 64, gmm2d, sched100)
    assert res.asymptotic < 1e-12


def test_abms_asymptotic_error_single_gaussian(single_gaussian, sched100):
    f = squared_distance(np.zeros(2))
    t = 45
    res = lab.abms_error(np.array([0.3, 0.1]), t, f, 3, 50, single_gaussian, sched100)
    C = _gaussian_post_cov(single_gaussian.covs[0], sched100.alpha_bar[t - 1])
    assert res.asymptotic == pytest.approx(np.trace(C), rel=1e-10)
    assert res.asymptotic_stderr < 1e-12


def test_jensen_gap_quadratic_closed_form(single_gaussian, sched100):
    Q = np.array([[1.0, 0.3], [0.3, -0.5]])
    f = QuadraticLoss(Q, np.array([0.1, 0.2]), 1.0)
    t = 30
    gap, err = lab.jensen_gap(np.array([0.0, 1.0]), t, f, single_gaussian, sched100)
    C = _gaussian_post_cov(single_gaussian.covs[0], sched100.alpha_bar[t])
    assert gap == pytest.approx(-np.trace(Q @ C), rel=1e-10)
    assert err == 0.0


def test_jensen_gap_convex_and_concave_signs(gmm2d, sched100):
    x = lab.sample_marginal(gmm2d, 50, sched100, np.random.default_rng(1), 10)
    convex, _ = lab.jensen_gap(x, 50, PseudoHuber(np.zeros(2), 0.5), gmm2d, sched100)
    concave, _ = lab.jensen_gap(x, 50, GaussianWell(np.zeros(2), 1.0, 1.0), gmm2d, sched100)
    assert np.all(convex <= 1e-12)
    # -exp(-r^2) is neither convex nor concave, so only check the bound
    bound = lab.gap_bound(x, 50, GaussianWell(np.zeros(2), 1.0, 1.0).global_L, gmm2d, sched100)
    assert np.all(np.abs(concave) <= bound)


def test_gauss_hermite_and_monte_carlo_expectations_agree(gmm2d, sched100):
    f = PseudoHuber(np.array([1.0, 0.0]), 0.8)
    post = gmm2d.posterior(np.array([0.3, -0.2]), sched100.alpha_bar[70])
    gh, _ = lab.conditional_expectation(post, f)
    xs = post.sample(np.random.default_rng(4), 200_000)
    vals = f(xs)
    assert abs(gh - vals.mean()) < 4 * vals.std() / math.sqrt(len(vals))


def test_error_triangle_with_imperfect_denoiser(gmm2d, sched100):
    f = PseudoHuber(np.array([0.5, -0.5]), 0.6)
    den = PerturbedDenoiser(ExactDenoiser(gmm2d, sched100), 0.2, 3)
    rng = np.random.default_rng(5)
    for t in (10, 50, 90):
        xt = lab.sample_marginal(gmm2d, t, sched100, rng, 20)
        post = gmm2d.posterior(xt, sched100.alpha_bar[t])
        target, _ = lab.conditional_expectation(post, f)
        err = np.abs(lab.dps_estimate(xt, t, f, den) - target)
        recon = np.linalg.norm(tweedie_x0_hat(xt, t, den, sched100) - post.mean(), axis=-1)
        gap, _ = lab.jensen_gap(xt, t, f, gmm2d, sched100)
        assert np.all(err <= f.global_K * recon + np.abs(gap) + 1e-10)


def test_intermediate_target_matches_monte_carlo(gmm2d, sched100):
    den = ExactDenoiser(gmm2d, sched100)
    f = squared_distance(np.array([1.0, 1.0]))
    xt = np.array([0.2, 0.9])
    exact = lab.intermediate_target(xt, 40, f, den)
    est = lab.abms_estimate(xt, 40, f, den, np.random.default_rng(6).standard_normal((100_000, 2)))
    assert exact == pytest.approx(float(est), rel=5e-3)
    with pytest.raises(ValueError):
        lab.intermediate_target(np.zeros(4), 40, f, den)


def test_abms_estimate_unbiased_for_intermediate_target(gmm2d, sched100):
    den = ExactDenoiser(gmm2d, sched100)
    f = PseudoHuber(np.zeros(2), 0.5)
    xt = np.array([-0.4, 0.6])
    est = lab.abms_estimate(np.broadcast_to(xt, (20_000, 2)), 50, f, den,
                            np.random.default_rng(7).standard_normal((20_000, 3, 2)))
    target = lab.intermediate_target(xt, 50, f, den)
    assert abs(est.mean() - target) < 4 * est.std() / math.sqrt(est.size)


def test_variance_scales_inversely_with_draws(gmm2d, sched100):
    f = squared_distance(gmm2d.means[0])
    res = lab.variance_scaling(f, [1, 2, 4, 8, 16], np.array([0.1, 0.2]), 50, 4000, gmm2d, sched100)
    assert not res.degenerate
    assert res.ci[0] <= -1.0 <= res.ci[1] or abs(res.slope + 1) < 0.05
    with pytest.raises(ValueError):
        lab.variance_scaling(f, [1, 2, 4], np.zeros(2), 50, 10, gmm2d, sched100)


def test_variance_scaling_degenerate_without_kernel_noise(gmm2d):
    sched = NoiseSchedule.linear(100, sigma_kind="zero")
    res = lab.variance_scaling(squared_distance(np.zeros(2)), [1, 2, 4, 8], np.zeros(2), 50, 100, gmm2d, sched)
    assert res.degenerate and math.isnan(res.slope)


def test_total_covariance_residual_is_small(gmm2d, sched100):
    xt = np.array([0.3, -0.7])
    res = lab.total_covariance_residual(gmm2d, xt, 50, sched100, 20_000, np.random.default_rng(8))
    assert abs(res.residual) < 4 * res.stderr + 1e-12
    assert res.total == pytest.approx(res.within + res.between, abs=4 * res.stderr + 1e-12)


def test_exact_kernel_preserves_marginals(gmm2d, sched100):
    rng = np.random.default_rng(9)
    t = 30
    xt = lab.sample_marginal(gmm2d, t, sched100, rng, 400)
    xs = np.stack([lab.sample_exact_kernel(gmm2d, x, t, sched100, rng, 1)[0] for x in xt])
    ref = lab.sample_marginal(gmm2d, t - 1, sched100, rng, 400)
    _, p = energy_test(xs, ref, rng=np.random.default_rng(1))
    assert p > 0.01


def test_error_comparison_verdicts(gmm2d, sched100):
    quad = lab.error_comparison_check(gmm2d, sched100, squared_distance(gmm2d.means[0]), 50, M=8, N_xt=300,
                                  N_inner=2000, n_boot=200)
    assert quad.verdict == lab.PASS and quad.p_value < 0.01
    assert quad.ci[0] > 0
    assert abs(quad.ub_gap - quad.between) < 4 * quad.ub_identity_stderr + 1e-12
    lin = lab.error_comparison_check(gmm2d, sched100, LinearLoss(np.array([1.0, 0.0])), 50, M=8, N_xt=100,
                                 L=1.0, N_inner=500, n_boot=100)
    assert lin.verdict == lab.INCONCLUSIVE
    assert json.loads(quad.to_json())["verdict"] == lab.PASS
    no_L = PseudoHuber(np.zeros(2), 0.5)
    no_L.global_L = None
    with pytest.raises(ValueError, match="Lipschitz"):
        lab.error_comparison_check(gmm2d, sched100, no_L, 50, N_xt=2)


def test_reports_are_consistent(gmm2d, sched100):
    f = squared_distance(gmm2d.means[1])
    reports = lab.estimator_reports(gmm2d, sched100, f, 50, M=3, N_xt=50, reps=8)
    dps, abms = reports
    assert dps.method == "dps" and abms.method == "abms" and abms.M == 3
    for r in reports:
        assert r.mae >= abs(r.bias) - 1e-12
        assert r.ub_t >= abs(r.jensen_gap) - 1e-12
        assert r.var >= 0
    with pytest.raises(NumericalError):
        lab.EstimatorReport(1, "dps", 1, float("nan"), 0, 0, 0, 0, 0, 0, 0, 0, 1, 0)


def test_report_serialization_is_deterministic(gmm2d, sched100):
    f = PseudoHuber(np.zeros(2), 0.5)
    a = lab.estimator_sweep(gmm2d, sched100, f, N_xt=20, reps=4, steps=[10, 60])
    b = lab.estimator_sweep(gmm2d, sched100, f, N_xt=20, reps=4, steps=[10, 60])
    assert lab.reports_to_csv(a) == lab.reports_to_csv(b)
    text = lab.reports_to_jsonl(a, {"T": 100})
    lines = text.splitlines()
    assert json.loads(lines[0])["schema_version"] == lab.SCHEMA_VERSION
    assert len(lines) == 1 + len(a)
    assert lab.reports_to_csv(a).splitlines()[0].split(",") == list(lab.CSV_COLUMNS)


@given(T=st.integers(10, 2000))
def test_decile_steps(T):
    steps = lab.decile_steps(T)
    assert steps[-1] == T and steps[0] >= 1 and steps == sorted(set(steps))


def test_gap_bound_holds_and_is_tight_for_isotropic_quadratics(gmm2d, sched100):
    res = lab.gap_bound_check(gmm2d, sched100, squared_distance(np.zeros(2)), [10, 50, 100], N=30)
    assert res.violations == 0 and res.quadratic_max_error < 1e-10
    assert res.max_ratio == pytest.approx(1.0, abs=1e-9)
    res = lab.gap_bound_check(gmm2d, sched100, PseudoHuber(np.zeros(2), 0.5), [10, 50, 100], N=30)
    assert res.violations == 0 and res.max_ratio < 1
