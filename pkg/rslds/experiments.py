"""Synthetic data generators: the NASCAR oval track and Bernoulli-Lorenz."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from rslds.errors import ValidationError
from rslds.model import Dataset, EmissionFamily, LatentPath, ModelParams, VariantTag, simulate
from rslds.settings import LorenzConfig, NascarConfig

logger = logging.getLogger(__name__)


# ============================================================================
# NASCAR
# ============================================================================

def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def nascar_params(config: NascarConfig, rng: np.random.Generator) -> ModelParams:
    """Ground-truth recurrence-only rSLDS whose trajectories trace ovals.

    States 0 and 1 rotate about the right and left centres, state 2 drives
    right along the top and state 3 drives left along the bottom. The three
    sticks fire for x > 2, x < -2 and y > 0, in that order.
    """
    K, M, N = config.K, config.M, config.N
    if (K, M) != (4, 2):
        raise ValidationError('the oval track is defined for K = 4, M = 2')
    rot = _rotation(config.angle)
    A = np.zeros((K, M, M))
    b = np.zeros((K, M))
    for k, center in enumerate(config.centers):
        center = np.asarray(center, dtype=float)
        A[k] = rot
        b[k] = center - rot @ center
    for k, speed in zip((2, 3), config.speeds):
        A[k] = np.eye(M)
        b[k] = [speed, 0.0]
    Q = np.broadcast_to(config.dynamics_noise * np.eye(M), (K, M, M)).copy()

    right, left, top = config.sharpness
    edge = abs(config.centers[0][0])
    R = np.zeros((K, 3, M))
    r = np.zeros((K, 3))
    R[:, 0] = [right, 0.0]
    r[:, 0] = -right * edge
    R[:, 1] = [-left, 0.0]
    r[:, 1] = -left * edge
    R[:, 2] = [0.0, top]

    C = rng.standard_normal((N, M))
    d = np.zeros(N)
    S = config.emission_noise * np.eye(N)
    return ModelParams(A=A, b=b, Q=Q, C=C, d=d, S=S, R=R, r=r, variant=VariantTag.RECURRENCE_ONLY)


def gen_nascar(rng: np.random.Generator, T: Optional[int] = None,
               config: Optional[NascarConfig] = None) -> tuple[ModelParams, LatentPath, Dataset]:
    """Ground truth, latent path and observations for the oval track, starting on the top straight."""
    config = config or NascarConfig()
    T = config.T if T is None else T
    if T < 1:
        raise ValidationError('T must be >= 1')
    params = nascar_params(config, rng)
    path, data = simulate(params, T, rng, x1=np.asarray(config.start, dtype=float), z1=2)
    logger.info(f'Generated {T} NASCAR steps, state counts {np.bincount(path.z, minlength=params.K).tolist()}')
    return params, path, data


# ============================================================================
# Lorenz
# ============================================================================

def lorenz_rhs(x: np.ndarray, alpha: float, beta: float, gamma: float) -> np.ndarray:
    x1, x2, x3 = x
    return np.array([alpha * (x2 - x1), x1 * (beta - x3) - x2, x1 * x2 - gamma * x3])


def integrate_lorenz(x0: Sequence[float], n_steps: int, step: float, alpha: float, beta: float,
                     gamma: float) -> np.ndarray:
    """Fixed-step RK4; returns the (n_steps + 1, 3) trajectory including x0."""
    if step <= 0:
        raise ValidationError('integration step must be > 0')
    out = np.zeros((n_steps + 1, 3))
    out[0] = x0
    f = lambda v: lorenz_rhs(v, alpha, beta, gamma)
    for i in range(n_steps):
        x = out[i]
        k1 = f(x)
        k2 = f(x + 0.5 * step * k1)
        k3 = f(x + 0.5 * step * k2)
        k4 = f(x + step * k3)
        out[i + 1] = x + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


@dataclass(frozen=True, eq=False)
class LorenzData:
    """Standardised Lorenz path, lobe labels, Bernoulli observations and their true rates."""
    path: LatentPath
    data: Dataset
    rho: np.ndarray
    C: np.ndarray
    d: np.ndarray


def gen_lorenz(rng: np.random.Generator, T: int, mask: Sequence[tuple[int, int]] = (),
               config: Optional[LorenzConfig] = None) -> LorenzData:
    """Sample one Lorenz trajectory every ``dt`` using ``substeps`` RK4 steps in between.

    The first ``burn_in`` samples are discarded, the rest standardised per
    coordinate and passed through a random logistic GLM. The lobe indicator
    I[x_1 > 0] is the ground-truth segmentation.
    """
    config = config or LorenzConfig()
    n_samples = T + config.burn_in
    inner = config.dt / config.substeps
    traj = integrate_lorenz(config.start, n_samples * config.substeps, inner,
                            config.alpha, config.beta, config.gamma)
    x = traj[config.substeps::config.substeps][config.burn_in:]
    x = (x - x.mean(axis=0)) / x.std(axis=0)

    wrng = rng if config.weights_seed is None else np.random.default_rng(config.weights_seed)
    C = config.weight_scale * wrng.standard_normal((config.N, 3))
    d = config.bias_scale * wrng.standard_normal(config.N)
    rho = expit(x @ C.T + d)
    y = (rng.random(rho.shape) < rho).astype(float)
    z = (x[:, 0] > 0).astype(int)
    data = Dataset.with_mask_intervals(y, mask, emission_family=EmissionFamily.BERNOULLI)
    logger.info(f'Generated {T} Lorenz steps with {config.N} Bernoulli outputs, {int((~data.mask).sum())} masked')
    return LorenzData(path=LatentPath(z=z, x=x), data=data, rho=rho, C=C, d=d)
