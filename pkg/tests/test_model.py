"""Tests for model parameters, simulation and the recurrence layout."""

import numpy as np
import pytest
from scipy.special import logsumexp

from rslds.errors import ValidationError
from rslds.model import (
    Dataset,
    EmissionFamily,
    RecurrenceLayout,
    VariantTag,
    log_transition_matrices,
    parse_model_name,
    permute_states,
    recurrence_logits,
    simulate,
    step_continuous,
    step_discrete,
    transition_probabilities,
)

from conftest import make_model


def test_parse_model_name():
    """CLI names map to (variant, transition structure)."""
    assert parse_model_name('rslds-s') == (VariantTag.SHARED, VariantTag.SHARED)
    assert parse_model_name('rarhmm') == (VariantTag.RARHMM, VariantTag.RSLDS)
    assert parse_model_name('rarhmm-ro') == (VariantTag.RARHMM, VariantTag.RECURRENCE_ONLY)
    with pytest.raises(ValidationError):
        parse_model_name('hmm')


def test_model_params_rejects_bad_shapes():
    """Inconsistent dynamics shapes are caught at construction."""
    params, _ = make_model('rslds')
    with pytest.raises(ValidationError):
        params.with_updates(b=np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        params.with_updates(R=np.zeros((2, 2, 2)))


def test_sticky_leave_rows_need_zero_diagonal():
    """Sticky leave distributions may not put mass on staying."""
    params, _ = make_model('rslds-sticky', K=3)
    assert np.all(np.diag(params.pi) == 0)
    with pytest.raises(ValidationError):
        params.with_updates(pi=np.full((3, 3), 1.0 / 3))


@pytest.mark.parametrize('name', ['slds', 'rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky'])
def test_transition_rows_normalise(rng, name):
    """Every conditional transition distribution sums to one."""
    params, _ = make_model(name, K=3)
    x = rng.standard_normal((7, params.M))
    lt = log_transition_matrices(params, x)
    assert lt.shape == (7, 3, 3)
    np.testing.assert_allclose(logsumexp(lt, axis=2), 0.0, atol=1e-10)
    for i in range(3):
        np.testing.assert_allclose(transition_probabilities(params, i, x[2]), np.exp(lt[2, i]), atol=1e-12)


def test_slds_transitions_ignore_x(rng):
    """Markov transitions do not depend on the continuous state."""
    params, _ = make_model('slds', K=3)
    lt = log_transition_matrices(params, rng.standard_normal((4, params.M)) * 10)
    np.testing.assert_allclose(lt[0], lt[3])


def test_sticky_stays_when_stay_logit_is_large(rng):
    """A very large stay logit keeps the state."""
    params, _ = make_model('rslds-sticky', K=3)
    params = params.with_updates(R=np.zeros_like(params.R), r=np.full_like(params.r, 50.0))
    assert all(step_discrete(params, 1, np.zeros(params.M), rng) == 1 for _ in range(20))


def test_step_discrete_rejects_bad_state(rng):
    """Out-of-range states are rejected."""
    params, _ = make_model('rslds')
    with pytest.raises(ValidationError):
        step_discrete(params, 5, np.zeros(params.M), rng)


def test_step_continuous_follows_the_state_dynamics(rng):
    """With negligible noise x_{t+1} is the affine image under the chosen state."""
    params, _ = make_model('rslds', K=2, M=2)
    params = params.with_updates(Q=np.stack([1e-12 * np.eye(2)] * 2))
    x = np.array([1.0, -2.0])
    for k in range(2):
        np.testing.assert_allclose(step_continuous(params, k, x, rng), params.A[k] @ x + params.b[k], atol=1e-4)
    with pytest.raises(ValidationError):
        step_continuous(params, 2, x, rng)


def test_simulate_shapes_and_rarhmm(rng):
    """Simulation returns consistent shapes; the rAR-HMM emits x itself."""
    params, _ = make_model('rslds', K=3, M=2, N=4)
    path, data = simulate(params, 25, rng)
    assert path.z.shape == (25,) and path.x.shape == (25, 2) and data.y.shape == (25, 4)
    assert set(np.unique(path.z)) <= {0, 1, 2}
    params, _ = make_model('rarhmm', K=2, M=2)
    path, data = simulate(params, 10, rng)
    np.testing.assert_array_equal(path.x, data.y)


def test_simulate_respects_initial_conditions(rng):
    """Given x1 and z1 are used as the first step."""
    params, _ = make_model('rslds')
    path, _ = simulate(params, 3, rng, x1=np.array([0.5, -0.5]), z1=1)
    assert path.z[0] == 1
    np.testing.assert_array_equal(path.x[0], [0.5, -0.5])


def test_dataset_zeroes_masked_rows():
    """Masked values are discarded on construction."""
    y = np.arange(12, dtype=float).reshape(6, 2)
    data = Dataset.with_mask_intervals(y, [(1, 3)])
    assert data.mask.tolist() == [True, False, False, True, True, True]
    assert not np.any(data.y[1:3])
    np.testing.assert_array_equal(data.y[3:], y[3:])


def test_dataset_validates_bernoulli_values():
    """Bernoulli data must be binary, except on masked rows."""
    with pytest.raises(ValidationError):
        Dataset(y=np.array([[0.0], [0.5]]), emission_family=EmissionFamily.BERNOULLI)
    data = Dataset(y=np.array([[0.0], [0.5]]), mask=np.array([True, False]),
                   emission_family=EmissionFamily.BERNOULLI)
    assert data.y[1, 0] == 0.0


@pytest.mark.parametrize('name', ['rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky'])
def test_layout_design_reproduces_logits(rng, name):
    """W[g_t] U_t equals the stick logits, and the projections build U_t."""
    params, _ = make_model(name, K=3)
    layout = RecurrenceLayout.for_params(params)
    x = rng.standard_normal((5, params.M))
    z = np.array([0, 1, 2, 1, 0])
    groups, U = layout.design(x, z)
    W = layout.pack(params.R, params.r)
    nu = np.einsum('tsd,td->ts', W[groups], U)
    np.testing.assert_allclose(nu, recurrence_logits(params, x, z), atol=1e-12)
    B = layout.projections()
    xt = np.hstack([x, np.ones((5, 1))])
    np.testing.assert_allclose(np.einsum('tdm,tm->td', B[z], xt), U, atol=1e-12)
    R, r = layout.unpack(W)
    np.testing.assert_allclose(R, params.R)
    np.testing.assert_allclose(r, params.r)


def test_layout_rejects_markov_models():
    """Markov transitions have no recurrence weights to lay out."""
    params, _ = make_model('slds')
    with pytest.raises(ValidationError):
        RecurrenceLayout.for_params(params)


def test_permute_states_round_trip():
    """Applying a relabel and then its inverse restores the parameters."""
    params, _ = make_model('slds', K=3)
    perm = np.array([2, 0, 1])
    back = permute_states(permute_states(params, perm), np.argsort(perm))
    np.testing.assert_allclose(back.A, params.A)
    np.testing.assert_allclose(back.pi, params.pi)
    assert back.permutation.tolist() == [0, 1, 2]
    moved = permute_states(params, perm)
    np.testing.assert_allclose(moved.A[0], params.A[2])
    assert moved.permutation.tolist() == [2, 0, 1]
