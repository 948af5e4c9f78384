"""Stick-breaking logistic link and its Pólya-gamma augmentations.

Labels are 0-based. With S sticks, outcome ``k < S`` takes stick ``k`` after
declining sticks ``0..k-1``; outcome ``S`` declines every stick.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from rslds.distributions import GaussianInfo, sample_pg
from rslds.errors import ValidationError

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 500.0


@dataclass(frozen=True, eq=False)
class TransitionAug:
    """PG variables for one or more transitions.

    Attributes:
        omega: Nonnegative draws, zero exactly where the stick is not reached
        kappa: Entries I[z = k] - 1/2 I[z >= k]
    """
    omega: np.ndarray
    kappa: np.ndarray


@dataclass(frozen=True, eq=False)
class EmissionAug:
    xi: np.ndarray
    kappa_y: np.ndarray


def log_pi_sb(nu: np.ndarray) -> np.ndarray:
    """Log stick-breaking pmf over the trailing axis: (..., S) -> (..., S + 1)."""
    nu = np.asarray(nu, dtype=float)
    if nu.shape[-1] == 0:
        return np.zeros(nu.shape[:-1] + (1,))
    passed = np.cumsum(log_expit(-nu), axis=-1)
    before = np.concatenate([np.zeros(nu.shape[:-1] + (1,)), passed[..., :-1]], axis=-1)
    return np.concatenate([log_expit(nu) + before, passed[..., -1:]], axis=-1)


def pi_sb(nu: np.ndarray) -> np.ndarray:
    """Stick-breaking pmf; the last entry is the product of sigma(-nu), not 1 - sum."""
    nu = np.clip(np.asarray(nu, dtype=float), -LOGIT_CLAMP, LOGIT_CLAMP)
    if nu.shape[-1] == 0:
        return np.ones(nu.shape[:-1] + (1,))
    passed = np.cumprod(expit(-nu), axis=-1)
    before = np.concatenate([np.ones(nu.shape[:-1] + (1,)), passed[..., :-1]], axis=-1)
    return np.concatenate([expit(nu) * before, passed[..., -1:]], axis=-1)


def log_pmf(z, nu: np.ndarray):
    """log p(z | nu), vectorised over leading axes of ``nu`` and ``z``."""
    nu = np.asarray(nu, dtype=float)
    z = np.asarray(z, dtype=int)
    S = nu.shape[-1]
    if np.any(z < 0) or np.any(z > S):
        raise ValidationError(f'state out of range for {S + 1} outcomes')
    lp = log_pi_sb(nu)
    out = np.take_along_axis(lp, np.broadcast_to(z, lp.shape[:-1])[..., None], axis=-1)[..., 0]
    return out if out.ndim else float(out)


def stick_indicators(z, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (I[z >= k], kappa) for sticks k = 0..S-1."""
    z = np.asarray(z, dtype=int)[..., None]
    k = np.arange(S)
    reached = (z >= k).astype(float)
    kappa = (z == k).astype(float) - 0.5 * reached
    return reached, kappa


def log_pmf_grad(z, nu: np.ndarray) -> np.ndarray:
    """Gradient of log_pmf with respect to nu: I[z = k] - I[z >= k] sigma(nu_k)."""
    nu = np.asarray(nu, dtype=float)
    reached, _ = stick_indicators(z, nu.shape[-1])
    taken = (np.asarray(z, dtype=int)[..., None] == np.arange(nu.shape[-1])).astype(float)
    return taken - reached * expit(nu)


def sample_transition_aug(z_next, nu: np.ndarray, rng: np.random.Generator) -> TransitionAug:
    """omega_k ~ PG(I[z_next >= k], nu_k); exact zeros where the stick is not reached."""
    nu = np.asarray(nu, dtype=float)
    reached, kappa = stick_indicators(z_next, nu.shape[-1])
    omega = np.asarray(sample_pg(reached, nu, rng), dtype=float).reshape(nu.shape)
    return TransitionAug(omega=omega, kappa=kappa)


def row_potential(outcome: int, aug: TransitionAug, R: np.ndarray, r: np.ndarray) -> GaussianInfo:
    """Gaussian factor on x_t from the augmented stick-breaking likelihood.

    ``R`` (S x M) and ``r`` (S,) are the recurrence rows already selected by
    the current state and ``outcome`` is what the sticks see. Sticks with
    omega = 0 contribute only their kappa term.
    """
    R = np.atleast_2d(R)
    if R.shape[0] != aug.omega.shape[-1] or np.shape(r) != aug.omega.shape:
        raise ValidationError(f'recurrence rows {R.shape} do not match {aug.omega.shape[-1]} sticks')
    _, kappa = stick_indicators(outcome, R.shape[0])
    active = aug.omega > 0
    Ra, wa = R[active], aug.omega[active]
    J = Ra.T @ (wa[:, None] * Ra)
    h = R.T @ kappa - Ra.T @ (wa * np.asarray(r)[active])
    return GaussianInfo(J=J, h=h)


def transition_potential(z_next: int, aug: TransitionAug, R: np.ndarray, r: np.ndarray, z_cur: int,
                         sticky: bool = False) -> GaussianInfo:
    """Factor on x_t for the transition z_cur -> z_next.

    ``R`` (K, S, M) and ``r`` (K, S) are the per-state recurrence weights as
    stored on ModelParams; shared variants already hold the same rows for every
    state. When ``sticky`` the single stick sees 0 for stay and 1 for leave.
    """
    R, r = np.asarray(R, dtype=float), np.asarray(r, dtype=float)
    if R.ndim != 3 or r.shape != R.shape[:2]:
        raise ValidationError(f'per-state recurrence weights expected, got {R.shape} and {r.shape}')
    if not 0 <= z_cur < R.shape[0]:
        raise ValidationError(f'current state {z_cur} out of range for {R.shape[0]} states')
    outcome = int(z_next != z_cur) if sticky else int(z_next)
    return row_potential(outcome, aug, R[z_cur], r[z_cur])


def transition_potentials(z_next: np.ndarray, omega: np.ndarray, R_sel: np.ndarray,
                          r_sel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched transition factors.

    Args:
        z_next: (T-1,) stick outcomes
        omega: (T-1, S) PG draws (or their expectations)
        R_sel: (T-1, S, M) recurrence weights selected by the current state
        r_sel: (T-1, S) recurrence biases selected by the current state

    Returns:
        (J, h) of shapes (T-1, M, M) and (T-1, M)
    """
    _, kappa = stick_indicators(z_next, omega.shape[-1])
    J = np.einsum('tsm,ts,tsn->tmn', R_sel, omega, R_sel)
    h = np.einsum('tsm,ts->tm', R_sel, kappa - omega * r_sel)
    return J, h


def sample_emission_aug(y: np.ndarray, nu_y: np.ndarray, rng: np.random.Generator) -> EmissionAug:
    """xi_n ~ PG(1, nu_n) for Bernoulli observations."""
    nu_y = np.asarray(nu_y, dtype=float)
    xi = np.asarray(sample_pg(np.ones_like(nu_y), nu_y, rng), dtype=float).reshape(nu_y.shape)
    return EmissionAug(xi=xi, kappa_y=np.asarray(y, dtype=float) - 0.5)


def bernoulli_emission_potential(y: np.ndarray, xi: np.ndarray, C: np.ndarray, d: np.ndarray) -> GaussianInfo:
    y = np.asarray(y, dtype=float)
    if np.any((y != 0) & (y != 1)):
        raise ValidationError('Bernoulli observations must be 0 or 1')
    kappa_y = y - 0.5
    J = C.T @ (xi[:, None] * C)
    h = C.T @ (kappa_y - xi * d)
    return GaussianInfo(J=J, h=h)


def bernoulli_emission_potentials(y: np.ndarray, xi: np.ndarray, C: np.ndarray, d: np.ndarray,
                                  mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Bernoulli evidence; masked rows contribute nothing."""
    w = xi * mask[:, None]
    kappa_y = (np.asarray(y, dtype=float) - 0.5) * mask[:, None]
    J = np.einsum('nm,tn,nk->tmk', C, w, C)
    h = (kappa_y - w * d) @ C
    return J, h
