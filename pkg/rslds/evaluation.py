"""Scoring fitted runs against synthetic ground truth."""

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from rslds.errors import ValidationError

logger = logging.getLogger(__name__)


def _check_lengths(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f'{what}: lengths differ ({a.shape[0]} vs {b.shape[0]})')


def confusion_matrix(z_true: np.ndarray, z_est: np.ndarray, K_true: int, K_est: int) -> np.ndarray:
    """counts[i, j] = #{t : z_true = i, z_est = j}."""
    counts = np.zeros((K_true, K_est))
    np.add.at(counts, (z_true, z_est), 1.0)
    return counts


def align_labels(z_true: np.ndarray, z_est: np.ndarray, K_true: Optional[int] = None,
                 K_est: Optional[int] = None) -> np.ndarray:
    """Map from estimated to true labels maximising agreement.

    Labels left over when ``K_est > K_true`` go to the true label they
    overlap most.
    """
    z_true = np.asarray(z_true, dtype=int)
    z_est = np.asarray(z_est, dtype=int)
    _check_lengths(z_true, z_est, 'align_labels')
    K_true = K_true or int(z_true.max()) + 1
    K_est = K_est or int(z_est.max()) + 1
    counts = confusion_matrix(z_true, z_est, K_true, K_est)
    rows, cols = linear_sum_assignment(-counts)
    mapping = np.argmax(counts, axis=0)
    mapping[cols] = rows
    return mapping


def segmentation_accuracy(z_true: np.ndarray, z_est: np.ndarray, mask: Optional[np.ndarray] = None,
                          K_true: Optional[int] = None, K_est: Optional[int] = None) -> float:
    """Fraction of steps (within ``mask`` if given) where aligned labels agree."""
    z_true = np.asarray(z_true, dtype=int)
    z_est = np.asarray(z_est, dtype=int)
    keep = np.ones(z_true.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mapping = align_labels(z_true[keep], z_est[keep], K_true or int(z_true.max()) + 1,
                           K_est or int(z_est.max()) + 1)
    return float(np.mean(mapping[z_est[keep]] == z_true[keep]))


@dataclass(frozen=True)
class DurationStats:
    n_runs: int
    mean: float
    std: float
    cv: float

    def to_json_dict(self) -> dict:
        return asdict(self)


def run_durations(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=int)
    if z.size == 0:
        return np.zeros(0, dtype=int)
    bounds = np.concatenate([[0], np.flatnonzero(np.diff(z)) + 1, [z.size]])
    return np.diff(bounds)


def duration_statistics(z: np.ndarray, drop_edges: bool = True) -> DurationStats:
    """Run-length summary of a state sequence.

    With ``drop_edges`` the first and last runs, which are censored, are
    left out whenever at least one interior run exists.
    """
    d = run_durations(z)
    if drop_edges and d.size > 2:
        d = d[1:-1]
    if d.size == 0:
        return DurationStats(0, 0.0, 0.0, 0.0)
    mean = float(d.mean())
    std = float(d.std())
    return DurationStats(n_runs=int(d.size), mean=mean, std=std, cv=std / mean if mean > 0 else 0.0)


def geometric_cv(mean: float) -> float:
    """Coefficient of variation of a geometric duration with the given mean."""
    if mean < 1:
        raise ValidationError('geometric durations have mean >= 1')
    return float(np.sqrt(1.0 - 1.0 / mean))


def affine_alignment_error(x_true: np.ndarray, x_est: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """RMS residual of the best affine map x_est -> x_true, relative to the spread of x_true."""
    x_true = np.atleast_2d(np.asarray(x_true, dtype=float))
    x_est = np.atleast_2d(np.asarray(x_est, dtype=float))
    _check_lengths(x_true, x_est, 'affine_alignment_error')
    if mask is not None:
        x_true, x_est = x_true[mask], x_est[mask]
    X = np.hstack([x_est, np.ones((x_est.shape[0], 1))])
    W, *_ = np.linalg.lstsq(X, x_true, rcond=None)
    resid = x_true - X @ W
    spread = float(np.sqrt(np.mean((x_true - x_true.mean(axis=0)) ** 2)))
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return rms / spread if spread > 0 else rms


def calibration_error(rho_est: np.ndarray, rho_true: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute difference between estimated and true event probabilities."""
    rho_est = np.asarray(rho_est, dtype=float)
    rho_true = np.asarray(rho_true, dtype=float)
    if rho_est.shape != rho_true.shape:
        raise ValidationError(f'shapes differ: {rho_est.shape} vs {rho_true.shape}')
    if mask is not None:
        rho_est, rho_true = rho_est[mask], rho_true[mask]
    return float(np.mean(np.abs(rho_est - rho_true)))
