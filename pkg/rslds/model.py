"""Parameter containers, the model-variant taxonomy, prior sampling and
forward simulation for the recurrent SLDS family.

State labels are 0-based. Dynamics for step t -> t+1 are indexed by the
state at t+1; the transition into z_{t+1} is conditioned on (z_t, x_t).
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from rslds.distributions import (
    DirichletParams,
    MNIWParams,
    safe_cholesky,
    sample_dirichlet,
    sample_mniw,
    symmetrize,
)
from rslds.errors import ValidationError
from rslds.settings import config
from rslds.stickbreak import log_pi_sb, pi_sb

logger = logging.getLogger(__name__)


class VariantTag(str, Enum):
    """Which transition structure a model uses."""
    SLDS = 'slds'
    RSLDS = 'rslds'
    SHARED = 'rslds-s'
    RECURRENCE_ONLY = 'rslds-ro'
    STICKY = 'rslds-sticky'
    RARHMM = 'rarhmm'


class EmissionFamily(str, Enum):
    GAUSSIAN = 'gaussian'
    BERNOULLI = 'bernoulli'


RECURRENT = (VariantTag.RSLDS, VariantTag.SHARED, VariantTag.RECURRENCE_ONLY, VariantTag.STICKY)


def parse_model_name(name: str) -> tuple[VariantTag, VariantTag]:
    """Map a CLI model name to (variant, transition structure).

    ``rarhmm`` uses per-state recurrence and ``rarhmm-ro`` the
    recurrence-only structure; every other name is its own structure.
    """
    if name == 'rarhmm':
        return VariantTag.RARHMM, VariantTag.RSLDS
    if name == 'rarhmm-ro':
        return VariantTag.RARHMM, VariantTag.RECURRENCE_ONLY
    try:
        tag = VariantTag(name)
    except ValueError as exc:
        raise ValidationError(f'unknown model {name!r}') from exc
    return tag, tag


def n_sticks(K: int, transitions: VariantTag) -> int:
    return 1 if transitions == VariantTag.STICKY else K - 1


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set of one model.

    Attributes:
        A, b, Q: Per-state dynamics, shapes (K, M, M), (K, M), (K, M, M)
        C, d: Emission weights (N, M) and offsets (N,); None for the rAR-HMM
        S: Gaussian emission covariance (N, N); None otherwise
        R, r: Recurrence weights (K, n_sticks, M) and biases (K, n_sticks).
            Rows are replicated across states when weights are shared.
        pi: Markov rows (slds) or leave distributions with zero diagonal
            (rslds-sticky); None otherwise
        variant: Model variant
        emission_family: Gaussian or Bernoulli observations
        transitions: Transition structure; differs from ``variant`` only for
            the rAR-HMM
        permutation: Relabelling applied at initialisation; new label j is old
            label permutation[j]
    """
    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    C: Optional[np.ndarray]
    d: Optional[np.ndarray]
    S: Optional[np.ndarray]
    R: np.ndarray
    r: np.ndarray
    pi: Optional[np.ndarray] = None
    variant: VariantTag = VariantTag.RSLDS
    emission_family: EmissionFamily = EmissionFamily.GAUSSIAN
    transitions: Optional[VariantTag] = None
    permutation: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, 'variant', VariantTag(self.variant))
        object.__setattr__(self, 'emission_family', EmissionFamily(self.emission_family))
        if self.transitions is None:
            object.__setattr__(self, 'transitions',
                               VariantTag.RSLDS if self.variant == VariantTag.RARHMM else self.variant)
        object.__setattr__(self, 'transitions', VariantTag(self.transitions))
        if self.transitions == VariantTag.RARHMM:
            raise ValidationError('rarhmm is not a transition structure')
        if self.permutation is None:
            object.__setattr__(self, 'permutation', np.arange(self.K))
        self._validate()

    def _validate(self):
        K, M = self.K, self.M
        if self.A.shape != (K, M, M) or self.b.shape != (K, M) or self.Q.shape != (K, M, M):
            raise ValidationError(f'dynamics shapes inconsistent: A {self.A.shape}, b {self.b.shape}, Q {self.Q.shape}')
        S = n_sticks(K, self.transitions)
        if self.R.shape != (K, S, M) or self.r.shape != (K, S):
            raise ValidationError(f'recurrence shapes {self.R.shape}, {self.r.shape} expected ({K}, {S}, {M})')
        if self.variant == VariantTag.RARHMM:
            if self.C is not None:
                raise ValidationError('rarhmm observes x directly and takes no emission parameters')
        else:
            if self.C is None or self.d is None or self.C.shape[1] != M or self.d.shape != (self.C.shape[0],):
                raise ValidationError('emission weights missing or inconsistent')
            if self.emission_family == EmissionFamily.GAUSSIAN and (
                    self.S is None or self.S.shape != (self.N, self.N)):
                raise ValidationError('Gaussian emissions need an N x N covariance S')
        if self.transitions in (VariantTag.SLDS, VariantTag.STICKY):
            if self.pi is None or self.pi.shape != (K, K):
                raise ValidationError(f'{self.transitions.value} needs a K x K pi matrix')
            if not np.allclose(self.pi.sum(axis=1), 1.0, atol=1e-8):
                raise ValidationError('pi rows must lie on the simplex')
            if self.transitions == VariantTag.STICKY and K > 1 and np.any(np.diag(self.pi) != 0):
                raise ValidationError('sticky leave distributions must have a zero diagonal')
        if sorted(self.permutation.tolist()) != list(range(K)):
            raise ValidationError('permutation must be a permutation of the states')

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.M if self.C is None else self.C.shape[0]

    @property
    def n_sticks(self) -> int:
        return self.R.shape[1]

    @property
    def is_recurrent(self) -> bool:
        return self.transitions in RECURRENT

    def with_updates(self, **kwargs) -> 'ModelParams':
        return replace(self, **kwargs)


@dataclass(frozen=True, eq=False)
class LatentPath:
    z: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'z', np.asarray(self.z, dtype=int))
        object.__setattr__(self, 'x', np.atleast_2d(np.asarray(self.x, dtype=float)))
        if self.z.shape[0] != self.x.shape[0]:
            raise ValidationError(f'z has {self.z.shape[0]} steps but x has {self.x.shape[0]}')

    @property
    def T(self) -> int:
        return self.z.shape[0]

    def check_states(self, K: int):
        if np.any(self.z < 0) or np.any(self.z >= K):
            raise ValidationError(f'discrete states must lie in 0..{K - 1}')


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations with a per-step mask (True = observed).

    Masked rows are zeroed on construction so nothing downstream can depend
    on their values.
    """
    y: np.ndarray
    mask: Optional[np.ndarray] = None
    emission_family: EmissionFamily = EmissionFamily.GAUSSIAN

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        mask = np.ones(y.shape[0], dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != (y.shape[0],):
            raise ValidationError(f'mask length {mask.shape} does not match T = {y.shape[0]}')
        y = np.where(mask[:, None], y, 0.0)
        family = EmissionFamily(self.emission_family)
        if family == EmissionFamily.BERNOULLI and np.any((y != 0) & (y != 1)):
            raise ValidationError('Bernoulli observations must be 0 or 1')
        if not np.all(np.isfinite(y)):
            raise ValidationError('observed values must be finite')
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'emission_family', family)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.y.shape[1]

    @classmethod
    def with_mask_intervals(cls, y, intervals, emission_family=EmissionFamily.GAUSSIAN) -> 'Dataset':
        mask = np.ones(np.shape(y)[0], dtype=bool)
        for start, stop in intervals:
            mask[start:stop] = False
        return cls(y=y, mask=mask, emission_family=emission_family)


# ============================================================================
# Hyperparameters and prior draws
# ============================================================================

@dataclass(frozen=True)
class Hyperparameters:
    """Prior hyperparameters.

    Attributes:
        alpha: Dirichlet concentration for pi rows
        dynamics: MNIW over [A_k | b_k], Q_k
        emissions: MNIW over [C | d], S; for Bernoulli rows only the mean
            rows and column covariance are used
        recurrence: Row-wise Gaussian prior N(M0[s], V0) on [R_s | r_s]
    """
    alpha: float
    dynamics: MNIWParams
    emissions: Optional[MNIWParams]
    recurrence: MNIWParams


def uniform_stick_logits(K: int) -> np.ndarray:
    """Logits whose stick-breaking pmf is uniform over K states."""
    return -np.log(K - 1 - np.arange(K - 1, dtype=float))


def default_hypers(K: int, M: int, N: int, variant: VariantTag = VariantTag.RSLDS,
                   transitions: Optional[VariantTag] = None) -> Hyperparameters:
    """Hyperparameters from the ``[hyperparameters]`` config section."""
    hp = config['hyperparameters']
    transitions = transitions or (VariantTag.RSLDS if variant == VariantTag.RARHMM else variant)
    dyn = hp['dynamics']
    dynamics = MNIWParams(
        M0=np.hstack([dyn['mean_scale'] * np.eye(M), np.zeros((M, 1))]),
        V0=dyn['col_variance'] * np.eye(M + 1),
        S0=dyn['scale'] * np.eye(M),
        n0=M + dyn['dof_offset'])
    emissions = None
    if variant != VariantTag.RARHMM:
        em = hp['emissions']
        emissions = MNIWParams(
            M0=np.zeros((N, M + 1)),
            V0=em['col_variance'] * np.eye(M + 1),
            S0=em['scale'] * np.eye(N),
            n0=N + em['dof_offset'])
    S = max(n_sticks(K, transitions), 1)
    rec_mean = np.zeros((S, M + 1))
    if transitions != VariantTag.STICKY and K > 1:
        rec_mean[:, M] = uniform_stick_logits(K)
    recurrence = MNIWParams(M0=rec_mean, V0=hp['recurrence']['col_variance'] * np.eye(M + 1),
                            S0=np.eye(S), n0=S + 2)
    return Hyperparameters(alpha=hp['alpha'], dynamics=dynamics, emissions=emissions, recurrence=recurrence)


def _gaussian_rows(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = safe_cholesky(cov, 'prior covariance')
    return mean + rng.standard_normal(mean.shape) @ L.T


def sample_leave_rows(K: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """K x K rows with zero diagonal, off-diagonal entries ~ Dirichlet(alpha)."""
    pi = np.zeros((K, K))
    if K == 1:
        return np.ones((1, 1))
    for k in range(K):
        others = np.delete(np.arange(K), k)
        pi[k, others] = sample_dirichlet(DirichletParams(np.full(K - 1, alpha)), rng)
    return pi


def sample_recurrence(hypers: Hyperparameters, K: int, M: int, transitions: VariantTag,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S = n_sticks(K, transitions)
    prior = hypers.recurrence
    if transitions == VariantTag.SLDS or S == 0:
        return np.zeros((K, S, M)), np.zeros((K, S))
    if transitions in (VariantTag.RSLDS, VariantTag.STICKY):
        W = _gaussian_rows(np.broadcast_to(prior.M0[:S], (K, S, M + 1)), prior.V0, rng)
        return W[..., :M], W[..., M]
    if transitions == VariantTag.RECURRENCE_ONLY:
        W = _gaussian_rows(prior.M0[:S], prior.V0, rng)
        return np.broadcast_to(W[:, :M], (K, S, M)).copy(), np.broadcast_to(W[:, M], (K, S)).copy()
    # shared weights, per-state biases
    Rs = _gaussian_rows(prior.M0[:S, :M], prior.V0[:M, :M], rng)
    r = prior.M0[:S, M][None, :] + np.sqrt(prior.V0[M, M]) * rng.standard_normal((K, S))
    return np.broadcast_to(Rs, (K, S, M)).copy(), r


def sample_prior(hypers: Hyperparameters, K: int, M: int, N: int, variant: VariantTag,
                 rng: np.random.Generator, emission_family: EmissionFamily = EmissionFamily.GAUSSIAN,
                 transitions: Optional[VariantTag] = None) -> ModelParams:
    """Draw a full parameter set from the prior."""
    if K < 1 or M < 1 or N < 1:
        raise ValidationError('K, M and N must be positive')
    variant = VariantTag(variant)
    transitions = transitions or (VariantTag.RSLDS if variant == VariantTag.RARHMM else variant)
    A, b, Q = np.zeros((K, M, M)), np.zeros((K, M)), np.zeros((K, M, M))
    for k in range(K):
        W, Sigma = sample_mniw(hypers.dynamics, rng)
        A[k], b[k], Q[k] = W[:, :M], W[:, M], Sigma
    C = d = S = None
    if variant != VariantTag.RARHMM:
        if emission_family == EmissionFamily.GAUSSIAN:
            W, S = sample_mniw(hypers.emissions, rng)
        else:
            W = _gaussian_rows(hypers.emissions.M0, hypers.emissions.V0, rng)
        C, d = W[:, :M], W[:, M]
    R, r = sample_recurrence(hypers, K, M, transitions, rng)
    pi = None
    if transitions == VariantTag.SLDS:
        pi = np.stack([sample_dirichlet(DirichletParams(np.full(K, hypers.alpha)), rng) for _ in range(K)])
    elif transitions == VariantTag.STICKY:
        pi = sample_leave_rows(K, hypers.alpha, rng)
    return ModelParams(A=A, b=b, Q=Q, C=C, d=d, S=S, R=R, r=r, pi=pi, variant=variant,
                       emission_family=emission_family, transitions=transitions)


# ============================================================================
# Transitions
# ============================================================================

def recurrence_logits(params: ModelParams, x_prev: np.ndarray, z_prev: np.ndarray) -> np.ndarray:
    """Stick logits nu_t = R[z_t] x_t + r[z_t]; shape (T, n_sticks)."""
    x_prev = np.atleast_2d(x_prev)
    z_prev = np.atleast_1d(z_prev)
    return np.einsum('tsm,tm->ts', params.R[z_prev], x_prev) + params.r[z_prev]


def stick_outcomes(params: ModelParams, z_prev: np.ndarray, z_next: np.ndarray) -> np.ndarray:
    """Outcome seen by the sticks: the next state, or 0 = stay / 1 = leave when sticky."""
    if params.transitions == VariantTag.STICKY:
        return (np.asarray(z_next) != np.asarray(z_prev)).astype(int)
    return np.asarray(z_next, dtype=int)


def log_transition_matrices(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """log p(z_{t+1} = j | z_t = i, x_t) for every row of ``x``: shape (len(x), K, K)."""
    x = np.atleast_2d(x)
    T, K = x.shape[0], params.K
    if params.transitions == VariantTag.SLDS:
        with np.errstate(divide='ignore'):
            return np.broadcast_to(np.log(params.pi), (T, K, K)).copy()
    nu = np.einsum('ksm,tm->tks', params.R, x) + params.r[None]
    if params.transitions != VariantTag.STICKY:
        return log_pi_sb(nu)
    with np.errstate(divide='ignore'):
        log_leave = np.log(params.pi)
    out = log_expit(-nu) + log_leave[None]
    idx = np.arange(K)
    out[:, idx, idx] = log_expit(nu[..., 0]) if K > 1 else 0.0
    return out


def transition_probabilities(params: ModelParams, z_prev: int, x_prev: np.ndarray) -> np.ndarray:
    K = params.K
    if params.transitions == VariantTag.SLDS:
        return params.pi[z_prev]
    nu = params.R[z_prev] @ x_prev + params.r[z_prev]
    if params.transitions != VariantTag.STICKY:
        return pi_sb(nu)
    if K == 1:
        return np.ones(1)
    stay = expit(nu[0])
    probs = (1.0 - stay) * params.pi[z_prev]
    probs[z_prev] = stay
    return probs


def step_discrete(params: ModelParams, z_prev: int, x_prev: np.ndarray, rng: np.random.Generator) -> int:
    """Draw z_t given (z_{t-1}, x_{t-1})."""
    if not 0 <= z_prev < params.K:
        raise ValidationError(f'state {z_prev} out of range')
    if params.transitions == VariantTag.STICKY:
        if params.K == 1:
            return 0
        nu = params.R[z_prev, 0] @ x_prev + params.r[z_prev, 0]
        if rng.random() < expit(nu):
            return int(z_prev)
        return int(rng.choice(params.K, p=params.pi[z_prev]))
    probs = transition_probabilities(params, z_prev, x_prev)
    return int(rng.choice(params.K, p=probs / probs.sum()))


def _noise(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # all-zero covariance is the deterministic limit
    if not np.any(cov):
        return np.zeros(cov.shape[0])
    return safe_cholesky(cov, 'noise covariance') @ rng.standard_normal(cov.shape[0])


def step_continuous(params: ModelParams, z_t: int, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= z_t < params.K:
        raise ValidationError(f'state {z_t} out of range')
    return params.A[z_t] @ x_prev + params.b[z_t] + _noise(params.Q[z_t], rng)


def emit(params: ModelParams, z_t: int, x_t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw y_t. Emissions are shared across states, so ``z_t`` only gets range-checked."""
    if not 0 <= z_t < params.K:
        raise ValidationError(f'state {z_t} out of range')
    if params.variant == VariantTag.RARHMM:
        return np.array(x_t, dtype=float)
    logits = params.C @ x_t + params.d
    if params.emission_family == EmissionFamily.BERNOULLI:
        return (rng.random(params.N) < expit(logits)).astype(float)
    return logits + _noise(params.S, rng)


def simulate(params: ModelParams, T: int, rng: np.random.Generator,
             x1: Optional[np.ndarray] = None, z1: Optional[int] = None) -> tuple[LatentPath, Dataset]:
    """Roll the generative model forward for T steps.

    x_1 ~ N(0, I) and z_1 ~ Uniform unless given.
    """
    if T < 1:
        raise ValidationError('T must be >= 1')
    K, M = params.K, params.M
    z = np.zeros(T, dtype=int)
    x = np.zeros((T, M))
    z[0] = rng.integers(K) if z1 is None else z1
    x[0] = rng.standard_normal(M) if x1 is None else np.asarray(x1, dtype=float)
    for t in range(1, T):
        z[t] = step_discrete(params, z[t - 1], x[t - 1], rng)
        x[t] = step_continuous(params, z[t], x[t - 1], rng)
    y = np.stack([emit(params, z[t], x[t], rng) for t in range(T)])
    family = EmissionFamily.GAUSSIAN if params.variant == VariantTag.RARHMM else params.emission_family
    return LatentPath(z=z, x=x), Dataset(y=y, emission_family=family)


# ============================================================================
# Recurrence regression layout
# ============================================================================

@dataclass(frozen=True)
class RecurrenceLayout:
    """How the recurrence weights are pooled into Gaussian regressions.

    Each group ``g`` holds ``n_sticks`` independent rows of dimension ``D``.
    The per-step regressor for stick logits is ``design(x_t, z_t)``.

    Attributes:
        K, M: Model sizes
        transitions: Transition structure being laid out
        n_groups: 1 when weights are shared, otherwise K
        n_sticks: Sticks per group
        D: Regressor dimension (M + 1, or M + K for shared weights)
    """
    K: int
    M: int
    transitions: VariantTag
    n_groups: int = field(init=False)
    n_sticks: int = field(init=False)
    D: int = field(init=False)

    def __post_init__(self):
        if self.transitions not in RECURRENT:
            raise ValidationError(f'{self.transitions.value} has no recurrence weights')
        shared = self.transitions in (VariantTag.SHARED, VariantTag.RECURRENCE_ONLY)
        object.__setattr__(self, 'n_groups', 1 if shared else self.K)
        object.__setattr__(self, 'n_sticks', n_sticks(self.K, self.transitions))
        object.__setattr__(self, 'D', self.M + self.K if self.transitions == VariantTag.SHARED else self.M + 1)

    @classmethod
    def for_params(cls, params: ModelParams) -> 'RecurrenceLayout':
        return cls(K=params.K, M=params.M, transitions=params.transitions)

    def design(self, x_prev: np.ndarray, z_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (group index per step, regressor rows U) so that nu_t = W[g_t] U_t."""
        x_prev = np.atleast_2d(x_prev)
        z_prev = np.asarray(z_prev, dtype=int)
        n = x_prev.shape[0]
        if self.transitions == VariantTag.SHARED:
            return np.zeros(n, dtype=int), np.hstack([x_prev, np.eye(self.K)[z_prev]])
        U = np.hstack([x_prev, np.ones((n, 1))])
        groups = np.zeros(n, dtype=int) if self.n_groups == 1 else z_prev
        return groups, U

    def group_of(self, state: int) -> int:
        return 0 if self.n_groups == 1 else state

    def projections(self) -> np.ndarray:
        """(K, D, M + 1) maps B_i with design(x, i) = B_i [x; 1]."""
        M = self.M
        B = np.zeros((self.K, self.D, M + 1))
        B[:, np.arange(M), np.arange(M)] = 1.0
        if self.transitions == VariantTag.SHARED:
            B[np.arange(self.K), M + np.arange(self.K), M] = 1.0
        else:
            B[:, M, M] = 1.0
        return B

    def pack(self, R: np.ndarray, r: np.ndarray) -> np.ndarray:
        """(R, r) -> W of shape (n_groups, n_sticks, D)."""
        if self.transitions == VariantTag.SHARED:
            return np.concatenate([R[0], r.T], axis=1)[None]
        W = np.concatenate([R, r[..., None]], axis=-1)
        return W[:1] if self.n_groups == 1 else W

    def unpack(self, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        K, M = self.K, self.M
        if self.transitions == VariantTag.SHARED:
            R = np.broadcast_to(W[0, :, :M], (K, self.n_sticks, M)).copy()
            return R, W[0, :, M:].T.copy()
        W = np.broadcast_to(W, (K, self.n_sticks, self.D)) if self.n_groups == 1 else W
        return W[..., :M].copy(), W[..., M].copy()

    def prior(self, hyper: MNIWParams) -> tuple[np.ndarray, np.ndarray]:
        """Prior means (n_groups, n_sticks, D) and the shared row covariance (D, D)."""
        M, S = self.M, self.n_sticks
        if self.transitions == VariantTag.SHARED:
            mean = np.concatenate([hyper.M0[:S, :M], np.repeat(hyper.M0[:S, M:M + 1], self.K, axis=1)], axis=1)
            cov = np.zeros((self.D, self.D))
            cov[:M, :M] = hyper.V0[:M, :M]
            cov[M:, M:] = hyper.V0[M, M] * np.eye(self.K)
            return mean[None], cov
        return np.broadcast_to(hyper.M0[:S], (self.n_groups, S, self.D)).copy(), hyper.V0


# ============================================================================
# Relabelling and JSON
# ============================================================================

def permute_states(params: ModelParams, perm: np.ndarray) -> ModelParams:
    """Relabel states so new label j is old label ``perm[j]``.

    Dynamics, Markov rows and per-state recurrence rows follow the relabel;
    the order of the sticks within each row is left as it is.
    """
    perm = np.asarray(perm, dtype=int)
    pi = None if params.pi is None else params.pi[np.ix_(perm, perm)]
    return params.with_updates(
        A=params.A[perm], b=params.b[perm], Q=params.Q[perm],
        R=params.R[perm], r=params.r[perm], pi=pi,
        permutation=params.permutation[perm])


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def to_json_dict(params: ModelParams) -> dict:
    return {
        'variant': params.variant.value,
        'transitions': params.transitions.value,
        'emission_family': params.emission_family.value,
        'K': params.K, 'M': params.M, 'N': params.N,
        'A': _arr(params.A), 'b': _arr(params.b), 'Q': _arr(params.Q),
        'C': _arr(params.C), 'd': _arr(params.d), 'S': _arr(params.S),
        'R': _arr(params.R), 'r': _arr(params.r), 'pi': _arr(params.pi),
        'permutation': _arr(params.permutation),
    }


def from_json_dict(doc: dict) -> ModelParams:
    def get(key, shape=None):
        value = doc.get(key)
        if value is None:
            return None
        a = np.asarray(value, dtype=float)
        return a.reshape(shape) if shape is not None else a

    try:
        K, M = int(doc['K']), int(doc['M'])
        transitions = VariantTag(doc.get('transitions', doc['variant']))
        S = n_sticks(K, transitions)
        return ModelParams(
            A=get('A', (K, M, M)), b=get('b', (K, M)), Q=symmetrize(get('Q', (K, M, M))),
            C=get('C'), d=get('d'), S=None if doc.get('S') is None else symmetrize(get('S')),
            R=get('R', (K, S, M)), r=get('r', (K, S)), pi=get('pi'),
            variant=VariantTag(doc['variant']), emission_family=EmissionFamily(doc['emission_family']),
            transitions=transitions,
            permutation=np.asarray(doc.get('permutation', list(range(K))), dtype=int))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f'malformed parameter document: {exc}') from exc


def path_to_json_dict(path: LatentPath) -> dict:
    return {'z': path.z.tolist(), 'x': path.x.tolist()}
