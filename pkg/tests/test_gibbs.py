"""Tests for the blocked Gibbs sampler."""

import os

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import multivariate_normal

from rslds.distributions import MNIWParams, sample_pg
from rslds.errors import NumericalError, ValidationError
from rslds.evaluation import calibration_error, segmentation_accuracy
from rslds.experiments import gen_lorenz, gen_nascar
from rslds.gibbs import (
    AugmentationState,
    continuous_chain,
    emission_log_likes,
    initialize_state,
    run_gibbs,
    score_joint,
    sweep,
    transition_counts,
    update_dynamics,
    update_emissions,
    update_markov,
    update_recurrence,
)
from rslds.init import initialize_model
from rslds.model import Dataset, EmissionFamily, LatentPath, ModelParams, VariantTag, default_hypers, stick_outcomes
from rslds.serialization import read_ndjson, run_length_decode
from rslds.settings import SamplerConfig
from rslds.stickbreak import stick_indicators

from conftest import make_model, make_problem


def _quiet(**kwargs):
    return SamplerConfig(progress=False, **kwargs)


def test_sweep_keeps_omega_zero_pattern(variant_problem):
    """After a sweep omega is zero exactly on the sticks the new z never reaches."""
    params, hypers, path, data = variant_problem
    state = initialize_state(params, path, data, np.random.default_rng(3))
    for _ in range(2):
        state = sweep(state, data, _quiet(n_iters=1), hypers)
    if not state.params.is_recurrent:
        assert not np.any(state.aug.omega)
        return
    outcomes = stick_outcomes(state.params, state.path.z[:-1], state.path.z[1:])
    reached, _ = stick_indicators(outcomes, state.params.n_sticks)
    assert np.all((state.aug.omega == 0) == (reached == 0))


def test_sweep_preserves_shapes_and_validity(variant_problem):
    """Parameters drawn in a sweep pass model validation and keep their sizes."""
    params, hypers, path, data = variant_problem
    state = sweep(initialize_state(params, path, data, np.random.default_rng(1)), data, _quiet(n_iters=1), hypers)
    assert state.iteration == 1
    assert state.params.A.shape == params.A.shape and state.params.R.shape == params.R.shape
    assert state.path.x.shape == path.x.shape
    assert np.isfinite(score_joint(state.params, state.path, data))


def test_frozen_config_leaves_parameters_alone(small_problem):
    """Freezing every parameter block returns the same parameter object."""
    params, hypers, path, data = small_problem
    state = initialize_state(params, path, data, np.random.default_rng(0))
    config = SamplerConfig.frozen('omega', 'x', 'z', progress=False)
    assert sweep(state, data, config, hypers).params is params


def test_masked_values_do_not_change_the_sweep(small_problem):
    """Data differing only on masked steps gives identical draws."""
    params, hypers, path, _ = small_problem
    rng = np.random.default_rng(5)
    y = rng.standard_normal((path.T, params.N))
    mask = np.ones(path.T, dtype=bool)
    mask[10:20] = False
    y2 = y.copy()
    y2[10:20] += 100.0
    a = sweep(initialize_state(params, path, Dataset(y=y, mask=mask), np.random.default_rng(9)),
              Dataset(y=y, mask=mask), _quiet(n_iters=1), hypers)
    b = sweep(initialize_state(params, path, Dataset(y=y2, mask=mask), np.random.default_rng(9)),
              Dataset(y=y2, mask=mask), _quiet(n_iters=1), hypers)
    np.testing.assert_array_equal(a.path.x, b.path.x)
    np.testing.assert_array_equal(a.params.C, b.params.C)


def test_score_joint_drops_masked_emissions(small_problem):
    """Masking steps removes exactly their emission terms from the joint."""
    params, _, path, data = small_problem
    mask = np.ones(data.T, dtype=bool)
    mask[5:12] = False
    masked = Dataset(y=data.y, mask=mask)
    dropped = emission_log_likes(params, path.x, data)[5:12].sum()
    assert score_joint(params, path, data) - score_joint(params, path, masked) == pytest.approx(dropped, rel=1e-10)


def test_score_joint_rejects_bad_states(small_problem):
    """Paths with out-of-range states are rejected."""
    params, _, path, data = small_problem
    with pytest.raises(ValidationError):
        score_joint(params, LatentPath(z=np.full(path.T, 7), x=path.x), data)


def test_score_joint_rejects_singular_dynamics_noise(small_problem):
    """A rank-deficient Q is an error in the joint and in the x chain, not a jittered density."""
    params, _, path, data = small_problem
    singular = params.with_updates(Q=np.broadcast_to(np.diag([1.0, 0.0]), params.Q.shape).copy())
    with pytest.raises(NumericalError):
        score_joint(singular, path, data)
    with pytest.raises(NumericalError):
        continuous_chain(singular, path.z, np.zeros((path.T, 2, 2)), np.zeros((path.T, 2)))


def _direct_transition_prob(params, i, x, j):
    if params.transitions == VariantTag.SLDS:
        return params.pi[i, j]
    nu = params.R[i] @ x + params.r[i]
    if params.transitions == VariantTag.STICKY:
        stay = expit(nu[0])
        return stay if i == j else (1.0 - stay) * params.pi[i, j]
    p = np.prod(expit(-nu[:j]))
    return p * expit(nu[j]) if j < len(nu) else p


@pytest.mark.parametrize('name', ['slds', 'rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky'])
@pytest.mark.parametrize('T', [1, 2, 4])
def test_score_joint_matches_direct_sum(name, T):
    """The joint equals a term-by-term sum of textbook densities."""
    params, _, path, data = make_problem(name, K=3, M=2, N=3, T=T, seed=T)
    z, x = path.z, path.x
    expected = -np.log(3) + multivariate_normal.logpdf(x[0], np.zeros(2), np.eye(2))
    for t in range(T - 1):
        k = z[t + 1]
        expected += np.log(_direct_transition_prob(params, z[t], x[t], k))
        expected += multivariate_normal.logpdf(x[t + 1], params.A[k] @ x[t] + params.b[k], params.Q[k])
    for t in range(T):
        expected += multivariate_normal.logpdf(data.y[t], params.C @ x[t] + params.d, params.S)
    assert score_joint(params, path, data) == pytest.approx(expected, abs=1e-8)


def _prior_draws(block, rng, n):
    """Draws of one parameter block given no likelihood terms, with the prior's mean and variance."""
    T = 5
    M0 = np.full((3, 3), 0.5)
    if block in ('gaussian-emissions', 'bernoulli-emissions'):
        family = EmissionFamily.GAUSSIAN if block == 'gaussian-emissions' else EmissionFamily.BERNOULLI
        params, _ = make_model('rslds', K=2, M=2, N=3, family=family)
        path = LatentPath(z=np.zeros(T, dtype=int), x=rng.standard_normal((T, 2)))
        data = Dataset(y=np.ones((T, 3)), mask=np.zeros(T, dtype=bool), emission_family=family)
        aug = AugmentationState(omega=np.zeros((T - 1, 1)), xi=np.ones((T, 3)))
        prior = MNIWParams(M0=M0, V0=0.1 * np.eye(3), S0=np.eye(3), n0=9)
        draws = []
        for _ in range(n):
            C, d, _ = update_emissions(params, path, data, aug, prior, rng)
            draws.append(np.hstack([C, d[:, None]]).ravel())
        # Gaussian rows have covariance E[S_nn] V0 with E[S] = S0 / (n0 - N - 1)
        var = 0.1 / 5.0 if family == EmissionFamily.GAUSSIAN else 0.1
        return np.array(draws), M0.ravel(), np.full(9, var)
    if block == 'recurrence':
        params, _ = make_model('rslds', K=2, M=2)
        path = LatentPath(z=np.zeros(1, dtype=int), x=np.zeros((1, 2)))
        aug = AugmentationState(omega=np.zeros((0, 1)))
        prior = MNIWParams(M0=np.array([[0.5, -0.5, 1.0]]), V0=0.2 * np.eye(3), S0=np.eye(1), n0=3)
        draws = []
        for _ in range(n):
            R, r = update_recurrence(params, path, aug, prior, rng)
            draws.append(np.concatenate([R.ravel(), r.ravel()]))
        return np.array(draws), np.array([0.5, -0.5, 0.5, -0.5, 1.0, 1.0]), np.full(6, 0.2)
    params, _ = make_model('rslds-sticky' if block == 'sticky-markov' else 'slds', K=3)
    path = LatentPath(z=np.zeros(1, dtype=int), x=np.zeros((1, 2)))
    keep = ~np.eye(3, dtype=bool) if block == 'sticky-markov' else np.ones((3, 3), dtype=bool)
    draws = np.array([update_markov(params, path, 1.0, rng)[keep] for _ in range(n)])
    if block == 'sticky-markov':
        return draws, np.full(6, 0.5), np.full(6, 1.0 / 12.0)
    return draws, np.full(9, 1.0 / 3.0), np.full(9, 1.0 / 18.0)


@pytest.mark.parametrize('block', ['gaussian-emissions', 'bernoulli-emissions', 'recurrence', 'markov',
                                   'sticky-markov'])
def test_blocks_without_data_draw_from_the_prior(block, rng):
    """With the likelihood removed each conditional update reproduces its prior moments."""
    n = 3000
    draws, mean, var = _prior_draws(block, rng, n)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=5.0 * np.sqrt(var.max() / n))
    np.testing.assert_allclose(draws.var(axis=0), var, rtol=0.2)


def test_initialize_state_checks_data(small_problem):
    """Column count and family must match the model."""
    params, _, path, data = small_problem
    with pytest.raises(ValidationError):
        initialize_state(params, path, Dataset(y=data.y[:, :2]), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        initialize_state(params, path, Dataset(y=np.zeros_like(data.y), emission_family=EmissionFamily.BERNOULLI),
                         np.random.default_rng(0))


def test_update_dynamics_recovers_linear_system(rng):
    """With a weak prior, the dynamics draw lands near the generating system."""
    theta = 0.3
    A = 0.9 * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    T = 3000
    x = np.zeros((T, 2))
    for t in range(1, T):
        x[t] = A @ x[t - 1] + np.array([0.1, 0.0]) + 0.1 * rng.standard_normal(2)
    params = ModelParams(A=np.eye(2)[None], b=np.zeros((1, 2)), Q=np.eye(2)[None], C=np.eye(2), d=np.zeros(2),
                         S=np.eye(2), R=np.zeros((1, 0, 2)), r=np.zeros((1, 0)), pi=np.ones((1, 1)),
                         variant=VariantTag.SLDS)
    prior = MNIWParams(M0=np.zeros((2, 3)), V0=100.0 * np.eye(3), S0=0.01 * np.eye(2), n0=4)
    A_hat, b_hat, Q_hat = update_dynamics(params, LatentPath(z=np.zeros(T, dtype=int), x=x), prior, rng)
    np.testing.assert_allclose(A_hat[0], A, atol=0.05)
    np.testing.assert_allclose(b_hat[0], [0.1, 0.0], atol=0.05)
    np.testing.assert_allclose(Q_hat[0], 0.01 * np.eye(2), atol=0.003)


def test_update_dynamics_unused_state_draws_from_prior(rng):
    """A state with no steps gets a prior draw; a tight prior pins it."""
    params, _, path, _ = make_problem('slds', K=2)
    prior = MNIWParams(M0=np.hstack([0.5 * np.eye(2), np.zeros((2, 1))]), V0=1e-6 * np.eye(3),
                       S0=np.eye(2), n0=10)
    A, b, _ = update_dynamics(params, LatentPath(z=np.zeros(path.T, dtype=int), x=path.x), prior, rng)
    np.testing.assert_allclose(A[1], 0.5 * np.eye(2), atol=1e-2)
    np.testing.assert_allclose(b[1], 0.0, atol=1e-2)


def test_update_emissions_gaussian_ignores_masked_rows(rng):
    """The (C, d, S) draw fits the observed rows; garbage in masked rows has no effect."""
    T = 2000
    x = rng.standard_normal((T, 2))
    C = np.array([[1.0, -0.5], [0.3, 2.0], [0.0, 1.0]])
    d = np.array([0.5, -1.0, 0.0])
    y = x @ C.T + d + 0.1 * rng.standard_normal((T, 3))
    y[:100] = 50.0
    data = Dataset(y=y, mask=np.arange(T) >= 100, emission_family=EmissionFamily.GAUSSIAN)
    params, _ = make_model('rslds', K=2, M=2, N=3)
    prior = MNIWParams(M0=np.zeros((3, 3)), V0=100.0 * np.eye(3), S0=0.01 * np.eye(3), n0=5)
    C_hat, d_hat, S_hat = update_emissions(params, LatentPath(z=np.zeros(T, dtype=int), x=x), data, None, prior, rng)
    np.testing.assert_allclose(C_hat, C, atol=0.02)
    np.testing.assert_allclose(d_hat, d, atol=0.02)
    np.testing.assert_allclose(S_hat, 0.01 * np.eye(3), atol=0.003)


def test_update_emissions_bernoulli_recovers_glm(rng):
    """Alternating xi and row draws is a PG logistic-regression sampler that finds the generating GLM."""
    T = 3000
    x = rng.standard_normal((T, 2))
    C = np.array([[1.5, -1.0], [0.5, 1.0]])
    d = np.array([0.5, -0.5])
    y = (rng.random((T, 2)) < 1.0 / (1.0 + np.exp(-(x @ C.T + d)))).astype(float)
    data = Dataset(y=y, emission_family=EmissionFamily.BERNOULLI)
    params, _ = make_model('rslds', K=2, M=2, N=2, family=EmissionFamily.BERNOULLI)
    path = LatentPath(z=np.zeros(T, dtype=int), x=x)
    prior = MNIWParams(M0=np.zeros((2, 3)), V0=100.0 * np.eye(3), S0=np.eye(2), n0=4)
    C_hat, d_hat = np.zeros((2, 2)), np.zeros(2)
    draws = []
    for i in range(40):
        xi = sample_pg(np.ones((T, 2)), x @ C_hat.T + d_hat, rng)
        aug = AugmentationState(omega=np.zeros((T - 1, 1)), xi=xi)
        C_hat, d_hat, S_hat = update_emissions(params, path, data, aug, prior, rng)
        assert S_hat is None
        if i >= 20:
            draws.append(np.hstack([C_hat, d_hat[:, None]]))
    np.testing.assert_allclose(np.mean(draws, axis=0), np.hstack([C, d[:, None]]), atol=0.2)


def test_update_recurrence_recovers_weights(rng):
    """PG-augmented draws of the per-state stick weights settle on the generating recurrence."""
    params, _, _, _ = make_problem('rslds', K=2, M=2)
    R = np.array([[[2.0, -1.0]], [[-1.0, 1.5]]])
    r = np.array([[0.5], [-0.5]])
    params = params.with_updates(R=R, r=r)
    T = 4000
    x = rng.standard_normal((T, 2))
    z = np.zeros(T, dtype=int)
    for t in range(T - 1):
        nu = R[z[t], 0] @ x[t] + r[z[t], 0]
        z[t + 1] = 0 if rng.random() < 1.0 / (1.0 + np.exp(-nu)) else 1
    path = LatentPath(z=z, x=x)
    prior = MNIWParams(M0=np.zeros((1, 3)), V0=100.0 * np.eye(3), S0=np.eye(1), n0=3)
    R_hat, r_hat = np.zeros_like(R), np.zeros_like(r)
    draws_R, draws_r = [], []
    for i in range(40):
        nu = np.einsum('tm,tm->t', R_hat[z[:-1], 0], x[:-1]) + r_hat[z[:-1], 0]
        omega = sample_pg(np.ones(T - 1), nu, rng)[:, None]
        R_hat, r_hat = update_recurrence(params, path, AugmentationState(omega=omega), prior, rng)
        if i >= 20:
            draws_R.append(R_hat)
            draws_r.append(r_hat)
    np.testing.assert_allclose(np.mean(draws_R, axis=0), R, atol=0.25)
    np.testing.assert_allclose(np.mean(draws_r, axis=0), r, atol=0.25)


def test_update_markov_sticky_excludes_self_transitions(rng):
    """Leave rows keep a zero diagonal whatever the self-transition counts."""
    params, _, _, _ = make_problem('rslds-sticky', K=3)
    z = np.array([0, 0, 0, 1, 1, 2, 2, 2, 0])
    pi = update_markov(params, LatentPath(z=z, x=np.zeros((9, 2))), 1.0, rng)
    assert np.all(np.diag(pi) == 0)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0)
    assert transition_counts(z, 3)[0, 0] == 2


def test_run_gibbs_writes_trace_and_snapshots(small_problem, tmp_path):
    """Every sweep is traced; snapshots follow the thinning interval; averages use post burn-in sweeps."""
    params, hypers, path, data = small_problem
    state = initialize_state(params, path, data, np.random.default_rng(2))
    result = run_gibbs(state, data, _quiet(n_iters=4, thinning=2, burn_in=1), hypers, out_dir=str(tmp_path))
    records = read_ndjson(os.path.join(tmp_path, 'trace.ndjson'))
    assert [r['iteration'] for r in records] == [1, 2, 3, 4]
    assert set(records[0]) == {'iteration', 'z', 'log_joint', 'params_digest'}
    assert len(run_length_decode(records[-1]['z'])) == path.T
    assert sorted(os.listdir(os.path.join(tmp_path, 'snapshots'))) == ['iter_000002.json', 'iter_000004.json']
    assert result.n_kept == 3
    np.testing.assert_allclose(result.state_probs.sum(axis=1), 1.0)
    assert len(result.log_joints) == 4


def test_run_gibbs_bernoulli_tracks_rates():
    """Bernoulli fits average event probabilities in [0, 1]."""
    params, hypers, path, data = make_problem('rslds', N=4, T=25, family=EmissionFamily.BERNOULLI)
    state = initialize_state(params, path, data, np.random.default_rng(4))
    assert state.aug.xi.shape == (25, 4)
    result = run_gibbs(state, data, _quiet(n_iters=2, burn_in=0), hypers)
    assert result.mean_rho.shape == (25, 4)
    assert np.all((result.mean_rho >= 0) & (result.mean_rho <= 1))


@pytest.mark.slow
def test_gibbs_segments_nascar():
    """Three hundred sweeps from the standard initialisation recover the NASCAR segmentation."""
    rng = np.random.default_rng(0)
    _, truth, data = gen_nascar(rng, T=2000)
    hypers = default_hypers(4, 2, data.N, VariantTag.RECURRENCE_ONLY)
    init = initialize_model(data, 4, 2, VariantTag.RECURRENCE_ONLY, rng, hypers=hypers)
    state = initialize_state(init.params, init.path, data, rng)
    result = run_gibbs(state, data, _quiet(n_iters=300, burn_in=100), hypers)
    assert segmentation_accuracy(truth.z, np.argmax(result.state_probs, axis=1)) >= 0.90


@pytest.mark.slow
def test_gibbs_interpolates_masked_lorenz_rates():
    """Bernoulli-Lorenz: lobes are found outside the mask and rates are interpolated inside it."""
    rng = np.random.default_rng(0)
    lorenz = gen_lorenz(rng, 2000, mask=[(700, 900)])
    data = lorenz.data
    hypers = default_hypers(2, 3, data.N, VariantTag.RSLDS)
    init = initialize_model(data, 2, 3, VariantTag.RSLDS, rng, hypers=hypers)
    state = initialize_state(init.params, init.path, data, rng)
    result = run_gibbs(state, data, _quiet(n_iters=300, burn_in=100), hypers)
    observed = data.mask
    z_hat = np.argmax(result.state_probs, axis=1)
    assert segmentation_accuracy(lorenz.path.z, z_hat, mask=observed) >= 0.85
    assert calibration_error(result.mean_rho[~observed, 0], lorenz.rho[~observed, 0]) <= 0.15
