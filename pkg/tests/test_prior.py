import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from abms.conditions import PseudoHuber, QuadraticLoss, squared_distance
from abms.errors import NumericalError
from abms.prior import (
    CANONICAL_PRIORS,
    ExactDenoiser,
    GaussianMixture,
    PerturbedDenoiser,
    canonical_prior,
    closed_form_expectation,
    condition_linear_gaussian,
    exact_posterior,
    exact_score,
    gauss_hermite_expectation,
    noised_marginal,
    oracle_conditional_expectation,
)

priors = st.sampled_from([(name, seed) for name in CANONICAL_PRIORS for seed in (0, 1, 2)])


def _point(prior, t, sched, seed):
    rng = np.random.default_rng(seed)
    a = sched.alpha_bar[t]
    return math.sqrt(a) * prior.sample(rng, 1)[0] + math.sqrt(1 - a) * rng.standard_normal(prior.n)


def test_canonical_priors_are_fixed():
    for name in CANONICAL_PRIORS:
        a, b = canonical_prior(name, 1), canonical_prior(name, 1)
        np.testing.assert_array_equal(a.means, b.means)
        assert abs(a.weights.sum() - 1) <= 1e-12
    assert canonical_prior("gmm2d_2").K == 2
    assert canonical_prior("ring2d_8").K == 8
    assert canonical_prior("gmm16d_4").n == 16
    with pytest.raises(KeyError):
        canonical_prior("nope")


def test_invalid_mixtures():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.1], [0.0, 1.0]]]))


def test_save_load_roundtrip(tmp_path, gmm16d):
    path = tmp_path / "p.json"
    gmm16d.save(path)
    back = GaussianMixture.load(path)
    np.testing.assert_array_equal(back.covs, gmm16d.covs)
    with pytest.raises(ValueError):
        GaussianMixture.from_dict({"weights": [1.0]})


def test_log_prob_single_gaussian(single_gaussian):
    x = np.array([[0.1, 0.2], [1.0, -1.0]])
    want = multivariate_normal(single_gaussian.means[0], single_gaussian.covs[0]).logpdf(x)
    np.testing.assert_allclose(single_gaussian.log_prob(x), want, rtol=1e-12)


@pytest.mark.parametrize("t", [1, 30, 99])
def test_noised_marginal_moments_by_monte_carlo(gmm2d, sched100, t):
    rng = np.random.default_rng(t)
    N = 40000
    a = sched100.alpha_bar[t]
    xt = math.sqrt(a) * gmm2d.sample(rng, N) + math.sqrt(1 - a) * rng.standard_normal((N, 2))
    marg = noised_marginal(gmm2d, t, sched100)
    se = np.sqrt(np.diag(marg.cov()) / N)
    assert np.all(np.abs(xt.mean(0) - marg.mean()) < 4 * se)
    np.testing.assert_allclose(np.cov(xt.T), marg.cov(), atol=0.03)


@given(p=priors, t=st.integers(1, 100), seed=st.integers(0, 10**6))
def test_score_is_gradient_of_log_density(sched100, p, t, seed):
    prior = canonical_prior(*p)
    x = _point(prior, t, sched100, seed)
    a = sched100.alpha_bar[t]
    h = 1e-5
    fd = np.array([(prior.log_prob(x + h * e, a) - prior.log_prob(x - h * e, a)) / (2 * h) for e in np.eye(prior.n)])
    s = exact_score(prior, x, t, sched100)
    assert np.linalg.norm(s - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


@given(p=priors, t=st.integers(1, 100), seed=st.integers(0, 10**6))
def test_score_hvp_matches_finite_differences(sched100, p, t, seed):
    prior = canonical_prior(*p)
    x = _point(prior, t, sched100, seed)
    v = np.random.default_rng(seed + 1).standard_normal(prior.n)
    a = sched100.alpha_bar[t]
    h = 1e-5
    fd = (prior.score(x + h * v, a) - prior.score(x - h * v, a)) / (2 * h)
    hv = prior.score_hvp(x, a, v)
    assert np.linalg.norm(hv - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))
    H = prior.score_hessian(x, a)
    np.testing.assert_allclose(H, H.T, atol=1e-10)


@given(p=priors, t=st.integers(1, 100), seed=st.integers(0, 10**6))
def test_tweedie_equals_posterior_mean(sched100, p, t, seed):
    prior = canonical_prior(*p)
    x = _point(prior, t, sched100, seed)
    den = ExactDenoiser(prior, sched100)
    a = sched100.alpha_bar[t]
    post = exact_posterior(prior, x, t, sched100)
    x0 = (x + (1 - a) * den.score(x, t)) / math.sqrt(a)
    m = post.mean()
    assert np.linalg.norm(x0 - m) <= 1e-8 * max(1.0, np.linalg.norm(m))
    assert abs(post.weights.sum() - 1) <= 1e-12


def test_posterior_mean_by_importance_sampling(gmm2d, sched100):
    t = 60
    a = sched100.alpha_bar[t]
    x = np.array([0.4, -0.2])
    rng = np.random.default_rng(0)
    x0 = gmm2d.sample(rng, 200000)
    logw = -np.sum((x - math.sqrt(a) * x0) ** 2, axis=1) / (2 * (1 - a))
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ x0
    ess = 1.0 / np.sum(w**2)
    se = np.sqrt(w @ (x0 - est) ** 2 / ess)
    post = exact_posterior(gmm2d, x, t, sched100)
    assert np.all(np.abs(post.mean() - est) < 4 * se + 1e-3)
    np.testing.assert_allclose(post.cov_trace(), np.trace(post.cov()), rtol=1e-10)


def test_posterior_is_dirac_at_clean_step(gmm2d, sched100):
    x = np.array([0.1, 0.9])
    post = exact_posterior(gmm2d, x, 0, sched100)
    np.testing.assert_allclose(post.mean(), x, atol=1e-12)
    assert post.cov_trace() == pytest.approx(0.0, abs=1e-12)


def test_batched_posterior(gmm16d, sched100):
    x = np.random.default_rng(0).standard_normal((3, 5, 16))
    post = gmm16d.posterior(x, sched100.alpha_bar[50])
    assert post.mean().shape == (3, 5, 16)
    assert post.cov_trace().shape == (3, 5)
    single = gmm16d.posterior(x[1, 2], sched100.alpha_bar[50])
    np.testing.assert_allclose(post.mean()[1, 2], single.mean(), rtol=1e-12)


def test_posterior_sampler_moments(gmm2d, sched100):
    post = exact_posterior(gmm2d, np.array([0.2, 0.3]), 70, sched100)
    xs = post.sample(np.random.default_rng(1), 50000)
    se = np.sqrt(np.diag(post.cov()) / 50000)
    assert np.all(np.abs(xs.mean(0) - post.mean()) < 4 * se)


def test_closed_form_and_quadrature_agree(gmm2d, sched100):
    post = exact_posterior(gmm2d, np.array([0.5, 0.0]), 50, sched100)
    Q = np.array([[2.0, 0.3], [0.3, 0.5]])
    f = QuadraticLoss(Q, np.array([0.1, -0.2]), 0.3)
    assert gauss_hermite_expectation(post, f) == pytest.approx(float(closed_form_expectation(post, f)), rel=1e-10)
    assert closed_form_expectation(post, PseudoHuber(np.zeros(2))) is None


def test_oracle_monte_carlo_within_stderr(gmm2d, sched100):
    f = squared_distance(np.array([1.0, 1.0]))
    e = oracle_conditional_expectation(gmm2d, np.array([0.3, -0.3]), 40, sched100, f, 20000, np.random.default_rng(2))
    assert abs(e.value - e.closed_form) < 4 * e.stderr


def test_oracle_names_offending_sample(gmm2d, sched100):
    class Bad:
        def __call__(self, x):
            return np.where(x[..., 0] > 0, np.nan, 0.0)

    with pytest.raises(NumericalError) as info:
        oracle_conditional_expectation(gmm2d, np.zeros(2), 90, sched100, Bad(), 100, np.random.default_rng(0))
    assert "index" in info.value.context


def test_condition_linear_gaussian_single_component(single_gaussian):
    A = np.array([[1.0, 0.5]])
    y = np.array([0.3])
    out = condition_linear_gaussian(single_gaussian, A, y, 0.1)
    m, S = single_gaussian.means[0], single_gaussian.covs[0]
    # joint Gaussian (x, y) conditioning written out directly
    Syy = A @ S @ A.T + 0.1
    np.testing.assert_allclose(out.means[0], m + (S @ A.T @ np.linalg.solve(Syy, y - A @ m)), rtol=1e-12)
    np.testing.assert_allclose(out.covs[0], S - S @ A.T @ np.linalg.solve(Syy, A @ S), atol=1e-12)
    with pytest.raises(ValueError):
        condition_linear_gaussian(single_gaussian, A, y, 0.0)


def test_condition_linear_gaussian_weights_by_sampling(gmm2d):
    A = np.array([[1.0, 0.0]])
    y = np.array([0.8])
    out = condition_linear_gaussian(gmm2d, A, y, 0.05)
    rng = np.random.default_rng(3)
    x0 = gmm2d.sample(rng, 400000)
    w = np.exp(-((x0[:, 0] - y[0]) ** 2) / 0.1)
    est = w @ x0 / w.sum()
    np.testing.assert_allclose(out.mean(), est, atol=0.02)


def test_terminal_marginal_is_nearly_standard(gmm2d, sched100):
    marg = noised_marginal(gmm2d, 100, sched100)
    np.testing.assert_allclose(marg.cov(), np.eye(2), atol=1e-3)


@given(seed=st.integers(0, 1000), t=st.integers(1, 100))
def test_perturbed_denoiser_vjp(gmm2d, sched100, seed, t):
    den = PerturbedDenoiser(ExactDenoiser(gmm2d, sched100), 0.7, seed)
    rng = np.random.default_rng(seed)
    x, v = rng.standard_normal((2, 2))
    h = 1e-6
    J = np.stack([(den.score(x + h * e, t) - den.score(x - h * e, t)) / (2 * h) for e in np.eye(2)], axis=1)
    np.testing.assert_allclose(den.score_vjp(x, t, v), v @ J, rtol=1e-5, atol=1e-6)


def test_perturbation_bound(gmm2d, sched100):
    den = PerturbedDenoiser(ExactDenoiser(gmm2d, sched100), 0.5)
    x = np.random.default_rng(0).standard_normal((100, 2))
    t = 50
    a = sched100.alpha_bar[t]
    err = np.linalg.norm((1 - a) * (den.score(x, t) - den.base.score(x, t)) / math.sqrt(a), axis=1)
    assert np.all(err <= 0.5 * math.sqrt(2) * (1 - a) / math.sqrt(a) + 1e-12)
