"""Blocked Gibbs sampler for the recurrent SLDS family.

One sweep resamples, in order, the transition PG variables, the emission PG
variables, the continuous path, the discrete path (with the transition PG
variables redrawn immediately after it) and the parameters.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit
from tqdm import tqdm

from rslds.distributions import (
    LOG_2PI,
    DirichletParams,
    MNIWParams,
    chol_inv,
    chol_logdet,
    dirichlet_posterior,
    gaussian_logpdf,
    mniw_posterior,
    safe_cholesky,
    sample_dirichlet,
    sample_mniw,
    sample_pg,
)
from rslds.errors import ValidationError
from rslds.messages import DiscreteChainSpec, GaussianChainSpec, ffbs_continuous, ffbs_discrete, uniform_log_init
from rslds.model import (
    Dataset,
    EmissionFamily,
    Hyperparameters,
    LatentPath,
    ModelParams,
    RecurrenceLayout,
    VariantTag,
    log_transition_matrices,
    recurrence_logits,
    stick_outcomes,
)
from rslds.serialization import NdjsonWriter, params_digest, run_length_encode, save_params
from rslds.settings import FILES, SamplerConfig
from rslds.stickbreak import bernoulli_emission_potentials, sample_transition_aug, stick_indicators, transition_potentials

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AugmentationState:
    """PG variables: omega (T-1, n_sticks) for transitions, xi (T, N) for Bernoulli emissions."""
    omega: np.ndarray
    xi: Optional[np.ndarray] = None


@dataclass(eq=False)
class GibbsState:
    params: ModelParams
    path: LatentPath
    aug: AugmentationState
    rng: np.random.Generator
    iteration: int = 0


# ============================================================================
# Potentials shared with scoring and variational inference
# ============================================================================

def check_data(params: ModelParams, data: Dataset):
    if params.variant == VariantTag.RARHMM:
        if not np.all(data.mask):
            raise ValidationError('rarhmm observes x directly and needs fully observed data')
        if data.N != params.M:
            raise ValidationError(f'rarhmm data has {data.N} columns but M = {params.M}')
        return
    if data.N != params.N:
        raise ValidationError(f'data has {data.N} columns but the model emits N = {params.N}')
    if data.emission_family != params.emission_family:
        raise ValidationError(
            f'data family {data.emission_family.value} does not match model {params.emission_family.value}')


def gaussian_evidence(params: ModelParams, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Node potentials C^T S^-1 C and C^T S^-1 (y_t - d) on observed steps."""
    S_inv = chol_inv(params.S, 'emission covariance', jitter=False)
    CtSi = params.C.T @ S_inv
    J = np.where(data.mask[:, None, None], (CtSi @ params.C)[None], 0.0)
    h = ((data.y - params.d) @ CtSi.T) * data.mask[:, None]
    return J, h


def recurrence_node_potentials(params: ModelParams, path_z: np.ndarray, omega: np.ndarray,
                               T: int) -> tuple[np.ndarray, np.ndarray]:
    M = params.M
    J = np.zeros((T, M, M))
    h = np.zeros((T, M))
    if params.is_recurrent and T > 1:
        z_prev = path_z[:-1]
        outcomes = stick_outcomes(params, z_prev, path_z[1:])
        J[:-1], h[:-1] = transition_potentials(outcomes, omega, params.R[z_prev], params.r[z_prev])
    return J, h


def continuous_chain(params: ModelParams, z: np.ndarray, J_node: np.ndarray, h_node: np.ndarray) -> GaussianChainSpec:
    """Gaussian chain for x given z, with x_0 ~ N(0, I)."""
    M = params.M
    Q_inv = np.stack([chol_inv(Q, 'dynamics covariance', jitter=False) for Q in params.Q])
    log_det = np.array([-chol_logdet(safe_cholesky(Q, 'dynamics covariance', jitter=False)) for Q in params.Q])
    k = z[1:]
    return GaussianChainSpec.from_dynamics(
        A=params.A[k], b=params.b[k], Q_inv=Q_inv[k], log_det_Q_inv=log_det[k],
        J_node=J_node, h_node=h_node, J_init=np.eye(M), h_init=np.zeros(M),
        init_const=-0.5 * M * LOG_2PI)


def dynamics_log_likes(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """(T-1, K) log N(x_{t+1} | A_k x_t + b_k, Q_k)."""
    preds = np.einsum('kij,tj->tki', params.A, x[:-1]) + params.b[None]
    return np.stack([gaussian_logpdf(x[1:], preds[:, k], params.Q[k]) for k in range(params.K)], axis=1)


def discrete_chain(params: ModelParams, x: np.ndarray) -> DiscreteChainSpec:
    """HMM factors for z given x: transition pmf times the dynamics likelihood of x_{t+1}."""
    T, K = x.shape[0], params.K
    log_trans = log_transition_matrices(params, x[:-1]) + dynamics_log_likes(params, x)[:, None, :]
    return DiscreteChainSpec(log_init=uniform_log_init(K), log_trans=log_trans, log_likes=np.zeros((T, K)))


# ============================================================================
# Latent blocks
# ============================================================================

def sample_omega(params: ModelParams, path: LatentPath, rng: np.random.Generator) -> np.ndarray:
    S = params.n_sticks
    if not params.is_recurrent or path.T < 2:
        return np.zeros((max(path.T - 1, 0), S))
    nu = recurrence_logits(params, path.x[:-1], path.z[:-1])
    outcomes = stick_outcomes(params, path.z[:-1], path.z[1:])
    return sample_transition_aug(outcomes, nu, rng).omega


def sample_xi(params: ModelParams, path: LatentPath, data: Dataset, rng: np.random.Generator) -> Optional[np.ndarray]:
    if params.emission_family != EmissionFamily.BERNOULLI or params.variant == VariantTag.RARHMM:
        return None
    nu = path.x @ params.C.T + params.d
    active = np.broadcast_to(data.mask[:, None], nu.shape).astype(float)
    return np.asarray(sample_pg(active, nu, rng), dtype=float).reshape(nu.shape)


def sample_x(params: ModelParams, path: LatentPath, aug: AugmentationState, data: Dataset,
             rng: np.random.Generator) -> np.ndarray:
    T = path.T
    if params.variant == VariantTag.RARHMM:
        return data.y.copy()
    if params.emission_family == EmissionFamily.GAUSSIAN:
        J_ev, h_ev = gaussian_evidence(params, data)
    else:
        J_ev, h_ev = bernoulli_emission_potentials(data.y, aug.xi, params.C, params.d, data.mask)
    J_rec, h_rec = recurrence_node_potentials(params, path.z, aug.omega, T)
    spec = continuous_chain(params, path.z, J_ev + J_rec, h_ev + h_rec)
    return ffbs_continuous(spec, rng)


def sample_z(params: ModelParams, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if params.K == 1:
        return np.zeros(x.shape[0], dtype=int)
    return ffbs_discrete(discrete_chain(params, x), rng)


def initialize_state(params: ModelParams, path: LatentPath, data: Dataset,
                     rng: np.random.Generator) -> GibbsState:
    """GibbsState with augmentation drawn consistently for ``path``."""
    check_data(params, data)
    path.check_states(params.K)
    if params.variant == VariantTag.RARHMM:
        path = LatentPath(z=path.z, x=data.y.copy())
    omega = sample_omega(params, path, rng)
    xi = sample_xi(params, path, data, rng)
    return GibbsState(params=params, path=path, aug=AugmentationState(omega=omega, xi=xi), rng=rng)


# ============================================================================
# Parameter blocks
# ============================================================================

def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def update_dynamics(params: ModelParams, path: LatentPath, prior: MNIWParams,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-state MNIW draws of (A_k, b_k, Q_k) from steps with z_{t+1} = k."""
    K, M = params.K, params.M
    A, b, Q = np.zeros((K, M, M)), np.zeros((K, M)), np.zeros((K, M, M))
    xs = _with_bias(path.x[:-1])
    for k in range(K):
        idx = np.flatnonzero(path.z[1:] == k)
        if idx.size == 0:
            logger.debug(f'state {k} has no steps, drawing dynamics from the prior')
        W, Sigma = sample_mniw(mniw_posterior(prior, xs[idx], path.x[1:][idx]), rng)
        A[k], b[k], Q[k] = W[:, :M], W[:, M], Sigma
    return A, b, Q


def _sample_gaussian_rows(P0: np.ndarray, m0: np.ndarray, JJ: np.ndarray, hh: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Draw each row r from N(J_r^-1 h_r, J_r^-1) with J_r = P0 + JJ[r], h_r = P0 m0[r] + hh[r]."""
    out = np.zeros_like(hh)
    for i in range(hh.shape[0]):
        L = safe_cholesky(P0 + JJ[i], 'row posterior precision')
        mean = linalg.cho_solve((L, True), P0 @ m0[i] + hh[i])
        out[i] = mean + linalg.solve_triangular(L.T, rng.standard_normal(hh.shape[1]), lower=False)
    return out


def update_emissions(params: ModelParams, path: LatentPath, data: Dataset, aug: AugmentationState,
                     prior: MNIWParams, rng: np.random.Generator):
    """Gaussian: MNIW draw of (C, d, S). Bernoulli: Gaussian draw of each row (c_n, d_n) given xi."""
    M = params.M
    obs = np.flatnonzero(data.mask)
    U = _with_bias(path.x[obs])
    if params.emission_family == EmissionFamily.GAUSSIAN:
        W, S = sample_mniw(mniw_posterior(prior, U, data.y[obs]), rng)
        return W[:, :M], W[:, M], S
    xi = aug.xi[obs]
    kappa = data.y[obs] - 0.5
    JJ = np.einsum('tn,td,te->nde', xi, U, U)
    hh = kappa.T @ U
    P0 = chol_inv(prior.V0, 'emission prior covariance')
    W = _sample_gaussian_rows(P0, prior.M0, JJ, hh, rng)
    return W[:, :M], W[:, M], None


def recurrence_statistics(layout: RecurrenceLayout, x_prev: np.ndarray, z_prev: np.ndarray, outcomes: np.ndarray,
                          omega: np.ndarray, weights: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Augmented-likelihood statistics per (group, stick): sum omega u u^T and sum kappa u.

    ``weights`` (n, n_groups) optionally spreads each step over groups, as
    when the conditioning state is uncertain.
    """
    G, S, D = layout.n_groups, layout.n_sticks, layout.D
    groups, U = layout.design(x_prev, z_prev)
    _, kappa = stick_indicators(outcomes, S)
    if weights is None:
        weights = np.zeros((U.shape[0], G))
        weights[np.arange(U.shape[0]), groups] = 1.0
    JJ = np.einsum('tg,ts,td,te->gsde', weights, omega, U, U)
    hh = np.einsum('tg,ts,td->gsd', weights, kappa, U)
    return JJ, hh


def update_recurrence(params: ModelParams, path: LatentPath, aug: AugmentationState, prior: MNIWParams,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian draw of every stick row from the PG-augmented likelihood."""
    layout = RecurrenceLayout.for_params(params)
    z_prev = path.z[:-1]
    outcomes = stick_outcomes(params, z_prev, path.z[1:])
    JJ, hh = recurrence_statistics(layout, path.x[:-1], z_prev, outcomes, aug.omega)
    mean0, cov0 = layout.prior(prior)
    P0 = chol_inv(cov0, 'recurrence prior covariance')
    G, S, D = JJ.shape[:3]
    W = _sample_gaussian_rows(P0, mean0.reshape(G * S, D), JJ.reshape(G * S, D, D), hh.reshape(G * S, D), rng)
    return layout.unpack(W.reshape(G, S, D))


def transition_counts(z: np.ndarray, K: int) -> np.ndarray:
    counts = np.zeros((K, K))
    np.add.at(counts, (z[:-1], z[1:]), 1.0)
    return counts


def update_markov(params: ModelParams, path: LatentPath, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draws of Markov rows, or of leave rows (self-transitions excluded) when sticky."""
    K = params.K
    counts = transition_counts(path.z, K)
    if params.transitions == VariantTag.SLDS:
        return np.stack([sample_dirichlet(dirichlet_posterior(DirichletParams(np.full(K, alpha)), counts[k]), rng)
                         for k in range(K)])
    pi = np.zeros((K, K))
    if K == 1:
        return np.ones((1, 1))
    for k in range(K):
        others = np.delete(np.arange(K), k)
        post = dirichlet_posterior(DirichletParams(np.full(K - 1, alpha)), counts[k, others])
        pi[k, others] = sample_dirichlet(post, rng)
    return pi


# ============================================================================
# Sweep
# ============================================================================

def sweep(state: GibbsState, data: Dataset, config: SamplerConfig, hypers: Hyperparameters) -> GibbsState:
    """One blocked Gibbs sweep; returns a new state."""
    params, path, aug, rng = state.params, state.path, state.aug, state.rng
    if config.update_omega:
        aug = replace(aug, omega=sample_omega(params, path, rng))
    if config.update_xi and aug.xi is not None:
        aug = replace(aug, xi=sample_xi(params, path, data, rng))
    if config.update_x and params.variant != VariantTag.RARHMM:
        path = LatentPath(z=path.z, x=sample_x(params, path, aug, data, rng))
    if config.update_z:
        path = LatentPath(z=sample_z(params, path.x, rng), x=path.x)
        # omega must match the new z's zero pattern before theta is updated
        aug = replace(aug, omega=sample_omega(params, path, rng))

    updates = {}
    if config.update_dynamics:
        updates['A'], updates['b'], updates['Q'] = update_dynamics(params, path, hypers.dynamics, rng)
    if config.update_emissions and params.variant != VariantTag.RARHMM:
        C, d, S = update_emissions(params, path, data, aug, hypers.emissions, rng)
        updates.update(C=C, d=d, S=S)
    if config.update_recurrence and params.is_recurrent:
        updates['R'], updates['r'] = update_recurrence(params, path, aug, hypers.recurrence, rng)
    if config.update_markov and params.transitions in (VariantTag.SLDS, VariantTag.STICKY):
        updates['pi'] = update_markov(params, path, hypers.alpha, rng)
    if updates:
        params = params.with_updates(**updates)
    return GibbsState(params=params, path=path, aug=aug, rng=rng, iteration=state.iteration + 1)


# ============================================================================
# Scoring
# ============================================================================

def emission_log_likes(params: ModelParams, x: np.ndarray, data: Dataset) -> np.ndarray:
    """(T,) log p(y_t | x_t) on observed steps, 0 on masked ones."""
    if params.variant == VariantTag.RARHMM:
        return np.zeros(x.shape[0])
    logits = x @ params.C.T + params.d
    if params.emission_family == EmissionFamily.BERNOULLI:
        ll = np.sum(data.y * log_expit(logits) + (1 - data.y) * log_expit(-logits), axis=1)
    else:
        ll = gaussian_logpdf(data.y, logits, params.S)
    return np.where(data.mask, ll, 0.0)


def score_joint(params: ModelParams, path: LatentPath, data: Dataset) -> float:
    """log p(z, x, y | theta) with z_0 uniform and x_0 ~ N(0, I).

    For the rAR-HMM the path's x is the observation and no emission term
    is added.
    """
    path.check_states(params.K)
    z, x = path.z, path.x
    T, K, M = path.T, params.K, params.M
    total = -np.log(K) - 0.5 * M * LOG_2PI - 0.5 * float(x[0] @ x[0])
    if T > 1:
        log_trans = log_transition_matrices(params, x[:-1])
        total += float(np.sum(log_trans[np.arange(T - 1), z[:-1], z[1:]]))
        preds = np.einsum('tij,tj->ti', params.A[z[1:]], x[:-1]) + params.b[z[1:]]
        for k in np.unique(z[1:]):
            idx = np.flatnonzero(z[1:] == k)
            total += float(np.sum(gaussian_logpdf(x[1:][idx], preds[idx], params.Q[k])))
    total += float(np.sum(emission_log_likes(params, x, data)))
    return float(total)


# ============================================================================
# Driver
# ============================================================================

@dataclass(eq=False)
class GibbsResult:
    """Final state plus posterior averages accumulated after burn-in.

    Attributes:
        state: State after the last sweep
        mean_x: (T, M) posterior mean of the continuous path
        state_probs: (T, K) per-step histogram of the discrete state
        mean_rho: (T, N) posterior mean event probabilities (Bernoulli only)
        log_joints: log joint after each sweep
        n_kept: Number of sweeps averaged
    """
    state: GibbsState
    mean_x: np.ndarray
    state_probs: np.ndarray
    mean_rho: Optional[np.ndarray]
    log_joints: list = field(default_factory=list)
    n_kept: int = 0


def run_gibbs(state: GibbsState, data: Dataset, config: SamplerConfig, hypers: Hyperparameters,
              out_dir: Optional[str] = None,
              callback: Optional[Callable[[GibbsState], None]] = None) -> GibbsResult:
    """Run ``config.n_iters`` sweeps, streaming a trace and snapshots into ``out_dir``."""
    T, K, M = state.path.T, state.params.K, state.params.M
    bernoulli = state.params.emission_family == EmissionFamily.BERNOULLI and state.params.variant != VariantTag.RARHMM
    sum_x = np.zeros((T, M))
    counts = np.zeros((T, K))
    sum_rho = np.zeros((T, state.params.N)) if bernoulli else None
    log_joints = []
    n_kept = 0
    writer = NdjsonWriter(os.path.join(out_dir, FILES['trace'])) if out_dir else None
    logger.info(f'Running {config.n_iters} Gibbs sweeps (K={K}, M={M}, T={T})')
    try:
        for i in tqdm(range(config.n_iters), disable=not config.progress, desc='gibbs'):
            state = sweep(state, data, config, hypers)
            log_joint = score_joint(state.params, state.path, data)
            log_joints.append(log_joint)
            if writer is not None:
                writer.write({'iteration': state.iteration,
                              'z': run_length_encode(state.path.z),
                              'log_joint': log_joint,
                              'params_digest': params_digest(state.params)})
                if state.iteration % config.thinning == 0:
                    save_params(os.path.join(out_dir, FILES['snapshots'], f'iter_{state.iteration:06d}.json'),
                                state.params)
            if i >= config.burn_in:
                sum_x += state.path.x
                counts[np.arange(T), state.path.z] += 1
                if bernoulli:
                    sum_rho += expit(state.path.x @ state.params.C.T + state.params.d)
                n_kept += 1
            logger.debug(f'sweep {state.iteration}: log joint {log_joint:.3f}')
            if callback is not None:
                callback(state)
    finally:
        if writer is not None:
            writer.close()
    if n_kept == 0:
        logger.warning('⚠️ No sweeps after burn-in, posterior averages use the final state only')
        sum_x, n_kept = state.path.x.copy(), 1
        counts[np.arange(T), state.path.z] = 1
        if bernoulli:
            sum_rho = expit(state.path.x @ state.params.C.T + state.params.d)
    logger.info(f'✅ Gibbs finished, final log joint {log_joints[-1]:.3f}')
    return GibbsResult(state=state, mean_x=sum_x / n_kept, state_probs=counts / n_kept,
                       mean_rho=None if sum_rho is None else sum_rho / n_kept,
                       log_joints=log_joints, n_kept=n_kept)
