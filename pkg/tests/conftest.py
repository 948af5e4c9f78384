"""Shared fixtures: seeded generators, small random models and toy datasets."""

import numpy as np
import pytest

from rslds.model import (
    EmissionFamily,
    VariantTag,
    default_hypers,
    parse_model_name,
    sample_prior,
    simulate,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_model(name='rslds', K=2, M=2, N=3, seed=0, family=EmissionFamily.GAUSSIAN):
    """Prior draw of a small model for the named variant."""
    variant, transitions = parse_model_name(name)
    N = M if variant == VariantTag.RARHMM else N
    hypers = default_hypers(K, M, N, variant, transitions)
    params = sample_prior(hypers, K, M, N, variant, np.random.default_rng(seed),
                          emission_family=family, transitions=transitions)
    return params, hypers


def make_problem(name='rslds', K=2, M=2, N=3, T=30, seed=0, family=EmissionFamily.GAUSSIAN):
    """A small model together with data simulated from it."""
    params, hypers = make_model(name, K, M, N, seed, family)
    path, data = simulate(params, T, np.random.default_rng(seed + 1))
    return params, hypers, path, data


@pytest.fixture
def small_problem():
    return make_problem()


@pytest.fixture(params=['slds', 'rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky'])
def variant_problem(request):
    return make_problem(request.param)
