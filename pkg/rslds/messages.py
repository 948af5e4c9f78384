"""Exact chain message passing.

Information-form filtering with backward sampling and smoothing for the
conditionally Gaussian chain, and log-space forward-backward, backward
sampling and Viterbi for the discrete chain.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from rslds.distributions import LOG_2PI, chol_logdet, safe_cholesky, symmetrize
from rslds.errors import MessagePassingError, NumericalError, ValidationError

logger = logging.getLogger(__name__)


# ============================================================================
# Gaussian chain
# ============================================================================

@dataclass(frozen=True, eq=False)
class GaussianChainSpec:
    """Log-quadratic chain over x_0..x_{T-1}.

    The log factor is

        -1/2 x_0^T J_init x_0 + h_init^T x_0
        + sum_t [-1/2 x_t^T J_node[t] x_t + h_node[t]^T x_t]
        + sum_t [-1/2 (x_t^T J11 x_t + 2 x_t^T J12 x_{t+1} + x_{t+1}^T J22 x_{t+1})
                 + h1^T x_t + h2^T x_{t+1}]
        + log_const

    Missing evidence is simply a zero node potential.
    """
    J_init: np.ndarray
    h_init: np.ndarray
    J_node: np.ndarray
    h_node: np.ndarray
    J11: np.ndarray
    J12: np.ndarray
    J22: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    log_const: float = 0.0

    def __post_init__(self):
        T, M = self.h_node.shape
        if self.J_node.shape != (T, M, M) or self.J_init.shape != (M, M):
            raise ValidationError('node potential shapes inconsistent')
        for name in ('J11', 'J12', 'J22'):
            if getattr(self, name).shape != (T - 1, M, M):
                raise ValidationError(f'{name} must have shape ({T - 1}, {M}, {M})')
        if self.h1.shape != (T - 1, M) or self.h2.shape != (T - 1, M):
            raise ValidationError('pairwise linear terms inconsistent')

    @property
    def T(self) -> int:
        return self.h_node.shape[0]

    @property
    def M(self) -> int:
        return self.h_node.shape[1]

    @classmethod
    def from_dynamics(cls, A: np.ndarray, b: np.ndarray, Q_inv: np.ndarray, log_det_Q_inv: np.ndarray,
                      J_node: np.ndarray, h_node: np.ndarray, J_init: np.ndarray, h_init: np.ndarray,
                      init_const: float = 0.0) -> 'GaussianChainSpec':
        """Chain whose pairwise terms are x_{t+1} ~ N(A_t x_t + b_t, Q_t).

        ``A``, ``b`` and ``Q_inv`` are the per-step selected dynamics of
        shape (T-1, ...).
        """
        M = h_node.shape[1]
        AtQi = np.einsum('tji,tjk->tik', A, Q_inv)
        J11 = symmetrize(AtQi @ A)
        J12 = -AtQi
        h1 = -np.einsum('tij,tj->ti', AtQi, b)
        h2 = np.einsum('tij,tj->ti', Q_inv, b)
        const = np.sum(-0.5 * np.einsum('ti,ti->t', b, h2) + 0.5 * log_det_Q_inv - 0.5 * M * LOG_2PI)
        return cls(J_init=J_init, h_init=h_init, J_node=J_node, h_node=h_node,
                   J11=J11, J12=J12, J22=Q_inv, h1=h1, h2=h2, log_const=float(const + init_const))

    def with_node(self, J_extra: np.ndarray, h_extra: np.ndarray) -> 'GaussianChainSpec':
        return GaussianChainSpec(self.J_init, self.h_init, self.J_node + J_extra, self.h_node + h_extra,
                                 self.J11, self.J12, self.J22, self.h1, self.h2, self.log_const)


@dataclass(frozen=True, eq=False)
class _Filtered:
    J_filt: np.ndarray
    h_filt: np.ndarray
    chol_pred: np.ndarray
    log_normalizer: float


def _chol_at(A: np.ndarray, t: int, what: str) -> np.ndarray:
    try:
        return safe_cholesky(A, what, jitter=False)
    except NumericalError as exc:
        raise MessagePassingError(f'{what} is indefinite', t) from exc


def _filter(spec: GaussianChainSpec) -> _Filtered:
    T, M = spec.T, spec.M
    J_filt = np.zeros((T, M, M))
    h_filt = np.zeros((T, M))
    chol_pred = np.zeros((max(T - 1, 0), M, M))
    log_z = spec.log_const
    J_pred, h_pred = spec.J_init, spec.h_init
    for t in range(T):
        J_filt[t] = symmetrize(J_pred + spec.J_node[t])
        h_filt[t] = h_pred + spec.h_node[t]
        if t == T - 1:
            break
        Jt = J_filt[t] + spec.J11[t]
        ht = h_filt[t] + spec.h1[t]
        L = _chol_at(Jt, t, 'forward message precision')
        chol_pred[t] = L
        sol = linalg.cho_solve((L, True), np.column_stack([spec.J12[t], ht]))
        J_pred = symmetrize(spec.J22[t] - spec.J12[t].T @ sol[:, :M])
        h_pred = spec.h2[t] - spec.J12[t].T @ sol[:, M]
        log_z += 0.5 * ht @ sol[:, M] + 0.5 * M * LOG_2PI - 0.5 * chol_logdet(L)
    L = _chol_at(J_filt[T - 1], T - 1, 'final filtered precision')
    log_z += 0.5 * h_filt[T - 1] @ linalg.cho_solve((L, True), h_filt[T - 1]) \
        + 0.5 * M * LOG_2PI - 0.5 * chol_logdet(L)
    return _Filtered(J_filt, h_filt, chol_pred, float(log_z))


def chain_log_normalizer(spec: GaussianChainSpec) -> float:
    """log of the integral of the chain factor over x_{0:T-1}."""
    return _filter(spec).log_normalizer


def ffbs_continuous(spec: GaussianChainSpec, rng: np.random.Generator) -> np.ndarray:
    """Joint draw of x_{0:T-1} from the normalised chain.

    Raises:
        MessagePassingError: If a message precision is indefinite
    """
    filt = _filter(spec)
    T, M = spec.T, spec.M
    x = np.zeros((T, M))
    L = _chol_at(filt.J_filt[T - 1], T - 1, 'final filtered precision')
    x[T - 1] = linalg.cho_solve((L, True), filt.h_filt[T - 1]) \
        + linalg.solve_triangular(L.T, rng.standard_normal(M), lower=False)
    for t in range(T - 2, -1, -1):
        L = filt.chol_pred[t]
        h = filt.h_filt[t] + spec.h1[t] - spec.J12[t] @ x[t + 1]
        x[t] = linalg.cho_solve((L, True), h) + linalg.solve_triangular(L.T, rng.standard_normal(M), lower=False)
    return x


@dataclass(frozen=True, eq=False)
class SmootherResult:
    """Marginal and adjacent pairwise moments of a Gaussian chain.

    Attributes:
        means: (T, M) E[x_t]
        covs: (T, M, M) Cov[x_t]
        cross_covs: (T-1, M, M) Cov[x_t, x_{t+1}]
        log_normalizer: log of the chain's integral
    """
    means: np.ndarray
    covs: np.ndarray
    cross_covs: np.ndarray
    log_normalizer: float

    @property
    def second_moments(self) -> np.ndarray:
        return self.covs + np.einsum('ti,tj->tij', self.means, self.means)

    @property
    def cross_moments(self) -> np.ndarray:
        """E[x_t x_{t+1}^T]."""
        return self.cross_covs + np.einsum('ti,tj->tij', self.means[:-1], self.means[1:])

    def entropy(self) -> float:
        """Differential entropy of the joint Gaussian over the whole chain."""
        T, M = self.means.shape
        # chain rule: H = H[x_{T-1}] + sum_t H[x_t | x_{t+1}]
        total = 0.5 * (M * (1 + LOG_2PI) + np.linalg.slogdet(self.covs[-1])[1])
        for t in range(T - 1):
            cond = self.covs[t] - self.cross_covs[t] @ np.linalg.solve(self.covs[t + 1], self.cross_covs[t].T)
            total += 0.5 * (M * (1 + LOG_2PI) + np.linalg.slogdet(symmetrize(cond))[1])
        return float(total)


def smoother_moments(spec: GaussianChainSpec) -> SmootherResult:
    """Exact marginals and adjacent cross-covariances via backward conditionals."""
    filt = _filter(spec)
    T, M = spec.T, spec.M
    means = np.zeros((T, M))
    covs = np.zeros((T, M, M))
    cross = np.zeros((max(T - 1, 0), M, M))
    L = _chol_at(filt.J_filt[T - 1], T - 1, 'final filtered precision')
    covs[T - 1] = symmetrize(linalg.cho_solve((L, True), np.eye(M)))
    means[T - 1] = covs[T - 1] @ filt.h_filt[T - 1]
    for t in range(T - 2, -1, -1):
        L = filt.chol_pred[t]
        Jt_inv = symmetrize(linalg.cho_solve((L, True), np.eye(M)))
        G = -Jt_inv @ spec.J12[t]
        means[t] = Jt_inv @ (filt.h_filt[t] + spec.h1[t]) + G @ means[t + 1]
        cross[t] = G @ covs[t + 1]
        covs[t] = symmetrize(Jt_inv + cross[t] @ G.T)
    return SmootherResult(means=means, covs=covs, cross_covs=cross, log_normalizer=filt.log_normalizer)


# ============================================================================
# Discrete chain
# ============================================================================

@dataclass(frozen=True, eq=False)
class DiscreteChainSpec:
    """Log-space HMM factors.

    Attributes:
        log_init: (K,) initial log weights
        log_trans: (T-1, K, K) log transition factors, entry [t, i, j] for z_t = i, z_{t+1} = j
        log_likes: (T, K) unary log factors
    """
    log_init: np.ndarray
    log_trans: np.ndarray
    log_likes: np.ndarray

    def __post_init__(self):
        T, K = self.log_likes.shape
        if self.log_init.shape != (K,) or self.log_trans.shape != (T - 1, K, K):
            raise ValidationError(
                f'discrete factors inconsistent: init {self.log_init.shape}, trans {self.log_trans.shape}, '
                f'likes {self.log_likes.shape}')

    @property
    def T(self) -> int:
        return self.log_likes.shape[0]

    @property
    def K(self) -> int:
        return self.log_likes.shape[1]


def _forward(spec: DiscreteChainSpec) -> np.ndarray:
    T, K = spec.T, spec.K
    alphas = np.zeros((T, K))
    with np.errstate(invalid='ignore'):
        alphas[0] = spec.log_init + spec.log_likes[0]
        if not np.any(np.isfinite(alphas[0])) or np.any(np.isnan(alphas[0])):
            raise MessagePassingError('all discrete states have zero probability', 0)
        for t in range(T - 1):
            alphas[t + 1] = logsumexp(alphas[t][:, None] + spec.log_trans[t], axis=0) + spec.log_likes[t + 1]
            if not np.any(np.isfinite(alphas[t + 1])) or np.any(np.isnan(alphas[t + 1])):
                raise MessagePassingError('all discrete states have zero probability', t + 1)
    return alphas


def _backward(spec: DiscreteChainSpec) -> np.ndarray:
    T, K = spec.T, spec.K
    betas = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        betas[t] = logsumexp(spec.log_trans[t] + (spec.log_likes[t + 1] + betas[t + 1])[None, :], axis=1)
    return betas


def _sample_log(logw: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(logw - np.max(logw))
    return int(rng.choice(len(p), p=p / p.sum()))


def ffbs_discrete(spec: DiscreteChainSpec, rng: np.random.Generator) -> np.ndarray:
    """Joint draw of z_{0:T-1} from the normalised chain.

    Raises:
        MessagePassingError: If every state has zero weight at some step
    """
    alphas = _forward(spec)
    T = spec.T
    z = np.zeros(T, dtype=int)
    z[T - 1] = _sample_log(alphas[T - 1], rng)
    for t in range(T - 2, -1, -1):
        logw = alphas[t] + spec.log_trans[t][:, z[t + 1]]
        if not np.any(np.isfinite(logw)):
            raise MessagePassingError('no state is consistent with the sampled successor', t)
        z[t] = _sample_log(logw, rng)
    return z


@dataclass(frozen=True, eq=False)
class HMMMarginals:
    """Expected state indicators.

    Attributes:
        unary: (T, K) q(z_t = k)
        pairwise: (T-1, K, K) q(z_t = i, z_{t+1} = j)
        log_normalizer: log of the chain's total weight
    """
    unary: np.ndarray
    pairwise: np.ndarray
    log_normalizer: float

    def entropy(self, spec: DiscreteChainSpec) -> float:
        """Entropy of the chain distribution defined by ``spec``."""
        with np.errstate(invalid='ignore', divide='ignore'):
            energy = (np.sum(np.where(self.unary[0] > 0, self.unary[0] * spec.log_init, 0.0))
                      + np.sum(np.where(self.unary > 0, self.unary * spec.log_likes, 0.0))
                      + np.sum(np.where(self.pairwise > 0, self.pairwise * spec.log_trans, 0.0)))
        return float(self.log_normalizer - energy)


def hmm_marginals(spec: DiscreteChainSpec) -> HMMMarginals:
    alphas = _forward(spec)
    betas = _backward(spec)
    log_z = float(logsumexp(alphas[-1]))
    unary = np.exp(alphas + betas - log_z)
    with np.errstate(invalid='ignore'):
        log_pair = (alphas[:-1, :, None] + spec.log_trans
                    + (spec.log_likes[1:] + betas[1:])[:, None, :] - log_z)
    pairwise = np.exp(np.nan_to_num(log_pair, nan=-np.inf))
    return HMMMarginals(unary=unary, pairwise=pairwise, log_normalizer=log_z)


def viterbi(spec: DiscreteChainSpec) -> np.ndarray:
    """Most likely state path."""
    T, K = spec.T, spec.K
    score = spec.log_init + spec.log_likes[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(T - 1):
        cand = score[:, None] + spec.log_trans[t]
        back[t + 1] = np.argmax(cand, axis=0)
        score = cand[back[t + 1], np.arange(K)] + spec.log_likes[t + 1]
    if not np.any(np.isfinite(score)):
        raise MessagePassingError('no path has positive probability', T - 1)
    z = np.zeros(T, dtype=int)
    z[-1] = int(np.argmax(score))
    for t in range(T - 1, 0, -1):
        z[t - 1] = back[t, z[t]]
    return z


def uniform_log_init(K: int, init: Optional[np.ndarray] = None) -> np.ndarray:
    return np.full(K, -np.log(K)) if init is None else np.log(init)
