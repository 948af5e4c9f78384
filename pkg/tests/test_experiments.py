"""Tests for the synthetic NASCAR and Bernoulli-Lorenz generators."""

import numpy as np
import pytest

from rslds.errors import ValidationError
from rslds.experiments import gen_lorenz, gen_nascar, integrate_lorenz, lorenz_rhs, nascar_params
from rslds.model import EmissionFamily, VariantTag
from rslds.settings import LorenzConfig, NascarConfig

CYCLE = {(2, 0), (0, 3), (3, 1), (1, 2)}


def test_nascar_shapes_and_structure(rng):
    """Four states in two dimensions, ten Gaussian outputs, weights shared across states."""
    params, path, data = gen_nascar(rng, T=200)
    assert (params.K, params.M, params.N) == (4, 2, 10)
    assert params.variant == VariantTag.RECURRENCE_ONLY
    assert path.z[0] == 2 and path.x.shape == (200, 2) and data.y.shape == (200, 10)
    np.testing.assert_array_equal(params.R[0], params.R[3])


def test_nascar_follows_the_oval(rng):
    """State changes run around the 2 -> 0 -> 3 -> 1 cycle and the path stays on the track."""
    _, path, _ = gen_nascar(rng, T=1000)
    z = path.z
    changes = [(int(a), int(b)) for a, b in zip(z[:-1], z[1:]) if a != b]
    assert len(changes) >= 8
    assert np.mean([c in CYCLE for c in changes]) > 0.9
    assert set(np.unique(z)) == {0, 1, 2, 3}
    assert np.abs(path.x).max() < 5.0


def test_nascar_rejects_other_sizes(rng):
    """The track is only defined for four states in the plane."""
    with pytest.raises(ValidationError):
        nascar_params(NascarConfig(K=3), rng)


def test_lorenz_origin_is_fixed():
    """The origin is an equilibrium of the flow."""
    np.testing.assert_array_equal(lorenz_rhs(np.zeros(3), 10.0, 28.0, 8 / 3), np.zeros(3))
    traj = integrate_lorenz([0.0, 0.0, 0.0], 50, 0.01, 10.0, 28.0, 8 / 3)
    assert traj.shape == (51, 3) and not np.any(traj)


def test_rk4_error_shrinks_fourth_order():
    """Halving the step cuts the integration error by roughly 16."""
    args = (10.0, 28.0, 8 / 3)
    fine = integrate_lorenz([1.0, 1.0, 1.0], 400, 0.0025, *args)[-1]
    coarse = integrate_lorenz([1.0, 1.0, 1.0], 100, 0.01, *args)[-1]
    mid = integrate_lorenz([1.0, 1.0, 1.0], 200, 0.005, *args)[-1]
    assert np.linalg.norm(coarse - fine) / np.linalg.norm(mid - fine) > 8.0


def test_integrate_lorenz_rejects_bad_step():
    """Non-positive steps are rejected."""
    with pytest.raises(ValidationError):
        integrate_lorenz([1.0, 1.0, 1.0], 10, 0.0, 10.0, 28.0, 8 / 3)


def test_gen_lorenz_data(rng):
    """Standardised path, lobe labels from the first coordinate, and a masked window of Bernoulli counts."""
    out = gen_lorenz(rng, 300, mask=[(100, 150)])
    x = out.path.x
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-10)
    np.testing.assert_array_equal(out.path.z, (x[:, 0] > 0).astype(int))
    assert out.data.emission_family == EmissionFamily.BERNOULLI
    assert int((~out.data.mask).sum()) == 50
    assert out.rho.shape == (300, 20) and np.all((out.rho > 0) & (out.rho < 1))
    assert set(np.unique(out.data.y)) <= {0.0, 1.0}


def test_gen_lorenz_weights_seed_fixes_glm():
    """A weights seed pins the GLM independently of the sampling generator."""
    config = LorenzConfig(weights_seed=7, burn_in=10)
    a = gen_lorenz(np.random.default_rng(0), 20, config=config)
    b = gen_lorenz(np.random.default_rng(1), 20, config=config)
    np.testing.assert_array_equal(a.C, b.C)
    np.testing.assert_array_equal(a.d, b.d)
