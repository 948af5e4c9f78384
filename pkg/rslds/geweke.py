"""Joint-distribution check of the Gibbs sampler.

Two ways of drawing (theta, z, x, y) should agree in law: independent
forward draws from the prior and generative model, and a chain that
alternates one Gibbs sweep with re-simulating y from p(y | x, theta).
Scalar probes from both arms are compared with two-sample KS tests.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import expit
from tqdm import tqdm

from rslds.errors import ValidationError
from rslds.gibbs import initialize_state, sweep
from rslds.model import (
    Dataset,
    EmissionFamily,
    Hyperparameters,
    LatentPath,
    ModelParams,
    VariantTag,
    sample_prior,
    simulate,
)
from rslds.settings import SamplerConfig

logger = logging.getLogger(__name__)

PROBE_NAMES = ('leading_eigenvalue_real', 'mean_x', 'occupancy_state0')


def probes(params: ModelParams, path: LatentPath) -> np.ndarray:
    eig = np.linalg.eigvals(params.A[0])
    return np.array([float(np.max(eig.real)), float(path.x.mean()), float(np.mean(path.z == 0))])


def resimulate_observations(params: ModelParams, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """y ~ p(y | x, theta) for every step at once."""
    logits = x @ params.C.T + params.d
    if params.emission_family == EmissionFamily.BERNOULLI:
        return (rng.random(logits.shape) < expit(logits)).astype(float)
    L = np.linalg.cholesky(params.S)
    return logits + rng.standard_normal(logits.shape) @ L.T


@dataclass(frozen=True, eq=False)
class GewekeResult:
    """Probe samples from both arms and their per-probe KS statistics."""
    forward: np.ndarray
    successive: np.ndarray
    ks_statistics: np.ndarray
    p_values: np.ndarray

    def passed(self, threshold: float) -> bool:
        return bool(np.all(self.ks_statistics < threshold))

    def to_json_dict(self) -> dict:
        return {
            'probes': list(PROBE_NAMES),
            'n_samples': int(self.forward.shape[0]),
            'ks_statistics': self.ks_statistics.tolist(),
            'p_values': self.p_values.tolist(),
            'forward_means': self.forward.mean(axis=0).tolist(),
            'successive_means': self.successive.mean(axis=0).tolist(),
        }


def _forward_draw(hypers: Hyperparameters, K: int, M: int, N: int, T: int, variant: VariantTag,
                  transitions: Optional[VariantTag], family: EmissionFamily,
                  rng: np.random.Generator) -> tuple[ModelParams, LatentPath, Dataset]:
    params = sample_prior(hypers, K, M, N, variant, rng, emission_family=family, transitions=transitions)
    path, data = simulate(params, T, rng)
    return params, path, data


def geweke_test(hypers: Hyperparameters, K: int, M: int, N: int, T: int, n_samples: int,
                rng: np.random.Generator, variant: VariantTag = VariantTag.RSLDS,
                transitions: Optional[VariantTag] = None,
                emission_family: EmissionFamily = EmissionFamily.GAUSSIAN,
                thinning: int = 1, progress: bool = False,
                callback: Optional[Callable[[int, np.ndarray], None]] = None) -> GewekeResult:
    """Run both arms for ``n_samples`` probe vectors each.

    ``thinning`` sweeps are taken between successive-arm records.

    Raises:
        ValidationError: For the rAR-HMM, whose x is the observation and
            cannot be re-simulated independently of it
    """
    variant = VariantTag(variant)
    if variant == VariantTag.RARHMM:
        raise ValidationError('the joint-distribution check needs a latent x; rarhmm observes x directly')
    if n_samples < 2 or thinning < 1:
        raise ValidationError('need n_samples >= 2 and thinning >= 1')

    forward = np.zeros((n_samples, len(PROBE_NAMES)))
    for i in range(n_samples):
        params, path, _ = _forward_draw(hypers, K, M, N, T, variant, transitions, emission_family, rng)
        forward[i] = probes(params, path)

    params, path, data = _forward_draw(hypers, K, M, N, T, variant, transitions, emission_family, rng)
    state = initialize_state(params, path, data, rng)
    config = SamplerConfig(n_iters=1, burn_in=0, progress=False)
    successive = np.zeros_like(forward)
    for i in tqdm(range(n_samples), desc='geweke', disable=not progress):
        for _ in range(thinning):
            state = sweep(state, data, config, hypers)
            data = Dataset(y=resimulate_observations(state.params, state.path.x, rng),
                           emission_family=emission_family)
        successive[i] = probes(state.params, state.path)
        if callback is not None:
            callback(i, successive[i])

    ks = [stats.ks_2samp(forward[:, j], successive[:, j]) for j in range(len(PROBE_NAMES))]
    result = GewekeResult(forward=forward, successive=successive,
                          ks_statistics=np.array([r.statistic for r in ks]),
                          p_values=np.array([r.pvalue for r in ks]))
    for name, d, p in zip(PROBE_NAMES, result.ks_statistics, result.p_values):
        logger.info(f'{name}: KS {d:.4f} (p = {p:.3f})')
    return result
