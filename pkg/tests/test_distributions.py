"""Tests for the samplers and conjugate kernels."""

import numpy as np
import pytest
from scipy import stats

from rslds.distributions import (
    DirichletParams,
    GaussianInfo,
    MNIWParams,
    dirichlet_expected_log,
    dirichlet_expected_log_density,
    dirichlet_kl,
    dirichlet_posterior,
    gaussian_logpdf,
    mniw_expectations,
    mniw_expected_log_density,
    mniw_kl,
    mniw_log_density,
    mniw_posterior,
    pg_mean,
    pg_variance,
    safe_cholesky,
    sample_mniw,
    sample_pg,
)
from rslds.errors import NumericalError, ValidationError


def _random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


@pytest.mark.parametrize('b,c', [(1, 0.0), (1, 1.5), (2, 4.0), (1, -3.0)])
def test_pg_moments_match_draws(rng, b, c):
    """Sample mean of PG(b, c) lies within four standard errors of the closed form."""
    n = 20000
    draws = sample_pg(np.full(n, b), np.full(n, c), rng)
    se = np.sqrt(pg_variance(b, c) / n)
    assert abs(draws.mean() - pg_mean(b, c)) < 4 * se


@pytest.mark.slow
def test_pg_grid_million_draws(rng):
    """Mean and variance over a grid of (b, c) with 10^6 draws each."""
    n = 10 ** 6
    for b in (1, 2, 5):
        for c in (0.0, 0.5, 2.0, 10.0):
            draws = sample_pg(np.full(n, b), np.full(n, c), rng)
            var = pg_variance(b, c)
            assert abs(draws.mean() - pg_mean(b, c)) < 4 * np.sqrt(var / n)
            assert abs(draws.var() - var) < 0.05 * var


def test_pg_mean_series_is_continuous():
    """The small-tilt series joins the closed form smoothly."""
    assert pg_mean(1, 0.0) == pytest.approx(0.25)
    assert pg_mean(1, 0.99e-4) == pytest.approx(pg_mean(1, 1.01e-4), rel=1e-8)
    assert pg_mean(3, 0.0) == pytest.approx(0.75)


def test_pg_variance_closed_form():
    """Variance agrees with b/(4c^3) (sinh c - c) / cosh^2(c/2) and b/24 at zero."""
    c = 2.0
    expected = 1.0 / (4 * c ** 3) * (np.sinh(c) - c) / np.cosh(c / 2) ** 2
    assert pg_variance(1, c) == pytest.approx(expected, rel=1e-12)
    assert pg_variance(2, 0.0) == pytest.approx(2 / 24)
    assert np.isfinite(pg_variance(1, 800.0))


def test_pg_zero_shape_is_point_mass(rng):
    """b = 0 entries come back as exact zeros."""
    out = sample_pg(np.array([0, 1, 0]), np.array([1.0, 1.0, -2.0]), rng)
    assert out[0] == 0.0 and out[2] == 0.0
    assert out[1] > 0.0


def test_pg_rejects_bad_inputs(rng):
    """Non-finite tilts and fractional shapes are rejected."""
    with pytest.raises(NumericalError):
        sample_pg(1, np.inf, rng)
    with pytest.raises(ValidationError):
        sample_pg(0.5, 1.0, rng)


def test_safe_cholesky_rejects_indefinite():
    """An indefinite matrix fails even after jitter."""
    with pytest.raises(NumericalError):
        safe_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_safe_cholesky_jitter_is_optional():
    """A singular covariance is rescued by jitter only when jitter is allowed."""
    singular = np.diag([1.0, 0.0])
    L = safe_cholesky(singular)
    assert np.all(np.isfinite(L)) and L[1, 1] > 0
    with pytest.raises(NumericalError):
        safe_cholesky(singular, jitter=False)


def test_gaussian_logpdf_rejects_singular_covariance():
    with pytest.raises(NumericalError):
        gaussian_logpdf(np.zeros(2), np.zeros(2), np.diag([1.0, 0.0]))


def test_mniw_posterior_without_rows_returns_prior():
    """No data means the prior object itself."""
    prior = MNIWParams(M0=np.zeros((2, 3)), V0=np.eye(3), S0=np.eye(2), n0=4)
    assert mniw_posterior(prior, np.zeros((0, 3)), np.zeros((0, 2))) is prior


def test_mniw_posterior_recovers_noiseless_regression(rng):
    """Posterior mean is within 1e-3 of the true weights with 10^4 noiseless rows."""
    W = rng.standard_normal((2, 3))
    xs = rng.standard_normal((10000, 3))
    ys = xs @ W.T
    prior = MNIWParams(M0=np.zeros((2, 3)), V0=np.eye(3), S0=np.eye(2), n0=4)
    post = mniw_posterior(prior, xs, ys)
    np.testing.assert_allclose(post.M0, W, atol=1e-3)
    assert post.n0 == pytest.approx(10004)


def test_mniw_posterior_is_permutation_invariant(rng):
    """Reordering rows leaves the posterior unchanged."""
    xs = rng.standard_normal((50, 2))
    ys = rng.standard_normal((50, 2))
    prior = MNIWParams(M0=np.zeros((2, 2)), V0=np.eye(2), S0=np.eye(2), n0=3)
    perm = rng.permutation(50)
    a, b = mniw_posterior(prior, xs, ys), mniw_posterior(prior, xs[perm], ys[perm])
    np.testing.assert_allclose(a.M0, b.M0, atol=1e-12)
    np.testing.assert_allclose(a.S0, b.S0, atol=1e-10)


def test_mniw_expectations_match_draws(rng):
    """E[Sigma^-1] and E[Sigma^-1 W] agree with Monte Carlo averages."""
    params = MNIWParams(M0=rng.standard_normal((2, 2)), V0=0.5 * np.eye(2), S0=_random_spd(rng, 2), n0=7)
    E = mniw_expectations(params)
    n = 20000
    si = np.zeros((2, 2))
    siw = np.zeros((2, 2))
    for _ in range(n):
        W, Sigma = sample_mniw(params, rng)
        inv = np.linalg.inv(Sigma)
        si += inv
        siw += inv @ W
    np.testing.assert_allclose(si / n, E.sigma_inv, rtol=0.05, atol=0.02)
    np.testing.assert_allclose(siw / n, E.sigma_inv_w, rtol=0.05, atol=0.05)


def test_mniw_expected_log_det_matches_wishart():
    """E ln|Sigma^-1| for p = 1 equals digamma(n/2) + ln 2 - ln S0."""
    from scipy.special import digamma
    params = MNIWParams(M0=np.zeros((1, 1)), V0=np.eye(1), S0=np.array([[3.0]]), n0=5.0)
    E = mniw_expectations(params)
    assert E.log_det_sigma_inv == pytest.approx(digamma(2.5) + np.log(2) - np.log(3.0))


def test_mniw_expected_log_density_matches_draws(rng):
    """The closed-form cross-entropy agrees with averaging the log density over draws."""
    q = MNIWParams(M0=rng.standard_normal((2, 3)), V0=0.5 * np.eye(3) + 0.1, S0=_random_spd(rng, 2), n0=8)
    p = MNIWParams(M0=np.zeros((2, 3)), V0=np.eye(3), S0=np.eye(2), n0=5)
    draws = np.array([mniw_log_density(*sample_mniw(q, rng), p) for _ in range(4000)])
    tol = 5.0 * draws.std() / np.sqrt(len(draws))
    assert mniw_expected_log_density(q, p) == pytest.approx(draws.mean(), abs=tol)
    assert mniw_kl(q, q) == pytest.approx(0.0, abs=1e-10)
    assert mniw_kl(q, p) > 0


def test_dirichlet_kl_closed_form():
    q = DirichletParams(np.array([2.0, 0.5, 3.0]))
    p = DirichletParams(np.ones(3))
    assert dirichlet_expected_log_density(q, q) == pytest.approx(-stats.dirichlet.entropy(q.alpha), abs=1e-10)
    assert dirichlet_kl(q, q) == pytest.approx(0.0, abs=1e-12)
    assert dirichlet_kl(q, p) > 0


def test_dirichlet_posterior_rejects_negative_counts():
    """Counts must be nonnegative."""
    with pytest.raises(ValidationError):
        dirichlet_posterior(DirichletParams(np.ones(3)), [1.0, -1.0, 0.0])


def test_dirichlet_expected_log_matches_draws(rng):
    """E[ln pi] agrees with the Monte Carlo average."""
    params = DirichletParams(np.array([2.0, 3.0, 0.5]))
    draws = rng.dirichlet(params.alpha, size=200000)
    np.testing.assert_allclose(np.log(draws).mean(axis=0), dirichlet_expected_log(params), atol=0.02)


def test_gaussian_info_marginalize_matches_moments(rng):
    """Schur complement marginals equal the sub-blocks of the moments."""
    cov = _random_spd(rng, 3)
    mean = rng.standard_normal(3)
    marg = GaussianInfo.from_moments(mean, cov).marginalize([2])
    m, c = marg.to_moments()
    np.testing.assert_allclose(m, mean[:2], atol=1e-10)
    np.testing.assert_allclose(c, cov[:2, :2], atol=1e-10)
    assert marg.log_partition() == pytest.approx(0.0, abs=1e-10)


def test_gaussian_info_condition_matches_formula(rng):
    """Clamping a coordinate gives the textbook conditional Gaussian."""
    cov = _random_spd(rng, 3)
    mean = rng.standard_normal(3)
    v = np.array([0.7])
    m, c = GaussianInfo.from_moments(mean, cov).condition([0], v).to_moments()
    S12 = cov[1:, :1]
    expected_mean = mean[1:] + (S12 @ np.linalg.solve(cov[:1, :1], v - mean[:1]))
    expected_cov = cov[1:, 1:] - S12 @ np.linalg.solve(cov[:1, :1], S12.T)
    np.testing.assert_allclose(m, expected_mean, atol=1e-10)
    np.testing.assert_allclose(c, expected_cov, atol=1e-10)


def test_gaussian_info_log_density_is_normalised(rng):
    """Normalised factors evaluate to the scipy log density."""
    cov = _random_spd(rng, 2)
    mean = rng.standard_normal(2)
    x = rng.standard_normal(2)
    info = GaussianInfo.from_moments(mean, cov)
    assert info.log_density(x) == pytest.approx(stats.multivariate_normal.logpdf(x, mean, cov), rel=1e-10)
