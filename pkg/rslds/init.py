"""Three-stage initialisation: latent extraction, AR-HMM pre-fit, stick ordering.

1. PPCA on the observed rows gives x_init (masked steps are interpolated).
2. An AR(1)-HMM fitted by EM on x_init gives z_init and per-state dynamics.
3. A greedy decision list on (x_t -> z_{t+1}) picks the state order best
   suited to stick breaking; its predicates seed the recurrence weights.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import optimize
from scipy.ndimage import uniform_filter1d
from scipy.special import log_expit, logit
from sklearn.cluster import KMeans

from rslds.distributions import MNIWStats, gaussian_logpdf, safe_cholesky, symmetrize
from rslds.errors import ValidationError
from rslds.messages import DiscreteChainSpec, hmm_marginals, uniform_log_init, viterbi
from rslds.model import (
    Dataset,
    EmissionFamily,
    Hyperparameters,
    LatentPath,
    ModelParams,
    VariantTag,
    default_hypers,
    n_sticks,
    path_to_json_dict,
    permute_states,
    to_json_dict,
)
from rslds.settings import InitConfig

logger = logging.getLogger(__name__)

COVARIANCE_FLOOR = 1e-6
CONSTANT_LOGIT = 5.0


# ============================================================================
# Stage 1: PPCA
# ============================================================================

@dataclass(frozen=True, eq=False)
class PPCAFit:
    """Maximum-likelihood PPCA: y ~ N(C x + d, sigma2 I), x ~ N(0, I)."""
    C: np.ndarray
    d: np.ndarray
    sigma2: float

    @property
    def covariance(self) -> np.ndarray:
        return self.C @ self.C.T + self.sigma2 * np.eye(self.C.shape[0])

    def posterior_means(self, y: np.ndarray) -> np.ndarray:
        M = self.C.shape[1]
        prec = self.C.T @ self.C + self.sigma2 * np.eye(M)
        return np.linalg.solve(prec, self.C.T @ (y - self.d).T).T


def ppca_fit(y: np.ndarray, M: int) -> PPCAFit:
    """Closed-form fit from the eigendecomposition of the sample covariance.

    When M equals the data dimension the noise variance falls back to a small
    floor so the covariance stays positive definite.
    """
    T, N = y.shape
    if T < M:
        raise ValidationError(f'{T} observed rows cannot support M = {M} latent dimensions')
    if M > N:
        raise ValidationError(f'M = {M} exceeds the data dimension N = {N}')
    d = y.mean(axis=0)
    cov = symmetrize((y - d).T @ (y - d) / T)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    scale = max(float(np.mean(np.abs(vals))), 1.0)
    sigma2 = float(np.mean(vals[M:])) if M < N else 0.0
    sigma2 = max(sigma2, COVARIANCE_FLOOR * scale)
    C = vecs[:, :M] * np.sqrt(np.clip(vals[:M] - sigma2, 0.0, None))
    return PPCAFit(C=C, d=d, sigma2=sigma2)


def _interpolate_masked(x_obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Latent means on every step, linear in time across masked gaps."""
    T = mask.shape[0]
    t_obs = np.flatnonzero(mask)
    x = np.zeros((T, x_obs.shape[1]))
    for m in range(x_obs.shape[1]):
        x[:, m] = np.interp(np.arange(T), t_obs, x_obs[:, m])
    return x


def smoothed_logits(data: Dataset, config: InitConfig) -> np.ndarray:
    """Logit of moving-average rates, clipped away from 0 and 1, on observed rows."""
    y = data.y[data.mask]
    rates = uniform_filter1d(y, size=config.smoothing_window, axis=0, mode='nearest')
    return logit(np.clip(rates, config.rate_clip, 1.0 - config.rate_clip))


def ppca_init(data: Dataset, M: int, config: Optional[InitConfig] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Return (x_init, C, d, S); S is None for Bernoulli data.

    Bernoulli data is fitted in logit space on smoothed rates; the fitted
    loadings become the initial GLM weights.
    """
    config = config or InitConfig()
    if not np.any(data.mask):
        raise ValidationError('no observed rows to initialise from')
    if data.emission_family == EmissionFamily.BERNOULLI:
        y = smoothed_logits(data, config)
    else:
        y = data.y[data.mask]
    fit = ppca_fit(y, M)
    x = _interpolate_masked(fit.posterior_means(y), data.mask)
    S = None if data.emission_family == EmissionFamily.BERNOULLI else fit.sigma2 * np.eye(data.N)
    logger.info(f'PPCA: kept {M} of {data.N} dimensions, noise variance {fit.sigma2:.3g}')
    return x, fit.C, fit.d, S


def ppca_log_likelihood(data: Dataset, M: int) -> float:
    """Log marginal likelihood of the observed rows under the fitted PPCA model."""
    y = data.y[data.mask]
    fit = ppca_fit(y, M)
    return float(np.sum(gaussian_logpdf(y, fit.d, fit.covariance)))


# ============================================================================
# Stage 2: AR-HMM
# ============================================================================

@dataclass(frozen=True, eq=False)
class ArhmmFit:
    z: np.ndarray
    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    pi: np.ndarray
    log_likelihoods: list = field(default_factory=list)


def _regress(x_prev: np.ndarray, x_next: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted least squares x_next ~ A x_prev + b with residual covariance."""
    M = x_prev.shape[1]
    X = np.hstack([x_prev, np.ones((x_prev.shape[0], 1))])
    stats = MNIWStats.from_rows(X, x_next, weights)
    n = max(stats.n, 1e-12)
    W = np.linalg.lstsq(stats.xx + 1e-10 * np.eye(M + 1), stats.yx.T, rcond=None)[0].T
    Q = symmetrize((stats.yy - W @ stats.yx.T - stats.yx @ W.T + W @ stats.xx @ W.T) / n)
    Q = Q + COVARIANCE_FLOOR * np.eye(M)
    return W[:, :M], W[:, M], Q


def _arhmm_log_likes(x: np.ndarray, A: np.ndarray, b: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """(T, K) unary terms; row 0 is zero, row t+1 scores x_{t+1} under state k."""
    T, K = x.shape[0], A.shape[0]
    ll = np.zeros((T, K))
    for k in range(K):
        ll[1:, k] = gaussian_logpdf(x[1:], x[:-1] @ A[k].T + b[k], Q[k])
    return ll


def _kmeans_labels(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Cluster (x_t, x_{t+1} - x_t) so clusters reflect local dynamics."""
    features = np.hstack([x[:-1], np.diff(x, axis=0)])
    km = KMeans(n_clusters=K, n_init=10, random_state=int(rng.integers(2**31 - 1))).fit(features)
    return np.concatenate([[km.labels_[0]], km.labels_]).astype(int)


def arhmm_init(x: np.ndarray, K: int, n_iters: int, rng: np.random.Generator,
               sticky: float = 0.9) -> ArhmmFit:
    """EM for a K-state AR(1)-HMM with Markov transitions, seeded by KMeans.

    The initial state distribution is held uniform. Returns the Viterbi path
    and the final parameters; ``log_likelihoods`` holds the marginal
    likelihood before each M-step.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError('x_init must be finite')
    T, M = x.shape
    if T < 2:
        raise ValidationError('AR-HMM needs at least two time steps')
    if K == 1:
        A, b, Q = _regress(x[:-1], x[1:], np.ones(T - 1))
        return ArhmmFit(z=np.zeros(T, dtype=int), A=A[None], b=b[None], Q=Q[None], pi=np.ones((1, 1)))

    z0 = _kmeans_labels(x, K, rng)
    A, b, Q = np.zeros((K, M, M)), np.zeros((K, M)), np.zeros((K, M, M))
    for k in range(K):
        w = (z0[1:] == k).astype(float)
        if w.sum() < M + 2:
            w = np.ones(T - 1)
        A[k], b[k], Q[k] = _regress(x[:-1], x[1:], w)
    pi = np.full((K, K), (1.0 - sticky) / (K - 1))
    np.fill_diagonal(pi, sticky)

    log_init = uniform_log_init(K)
    history = []
    for _ in range(n_iters):
        spec = DiscreteChainSpec(log_init=log_init, log_trans=np.broadcast_to(np.log(pi), (T - 1, K, K)).copy(),
                                 log_likes=_arhmm_log_likes(x, A, b, Q))
        post = hmm_marginals(spec)
        history.append(post.log_normalizer)
        for k in range(K):
            A[k], b[k], Q[k] = _regress(x[:-1], x[1:], post.unary[1:, k])
        counts = post.pairwise.sum(axis=0) + 1e-8
        pi = counts / counts.sum(axis=1, keepdims=True)
    spec = DiscreteChainSpec(log_init=log_init, log_trans=np.broadcast_to(np.log(pi), (T - 1, K, K)).copy(),
                             log_likes=_arhmm_log_likes(x, A, b, Q))
    z = viterbi(spec)
    if history:
        logger.info(f'AR-HMM EM: log likelihood {history[0]:.2f} -> {history[-1]:.2f} over {n_iters} iterations')
    return ArhmmFit(z=z, A=A, b=b, Q=Q, pi=pi, log_likelihoods=history)


# ============================================================================
# Stage 3: decision list
# ============================================================================

@dataclass(frozen=True, eq=False)
class DecisionList:
    """Ordered classifier: the first level j with w_j^T [x; 1] > 0 emits outputs[j].

    Attributes:
        outputs: Permutation of the K states; outputs[j] is the old label
            placed at position j
        weights: (K - 1, M + 1) predicate vectors
    """
    outputs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        K = self.outputs.shape[0]
        if sorted(self.outputs.tolist()) != list(range(K)):
            raise ValidationError('decision list outputs must be a permutation')
        if self.weights.shape[0] != K - 1:
            raise ValidationError(f'{K} outputs need {K - 1} predicates, got {self.weights.shape[0]}')

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        K = self.outputs.shape[0]
        U = np.hstack([x, np.ones((x.shape[0], 1))])
        fires = (U @ self.weights.T) > 0
        level = np.where(fires.any(axis=1), np.argmax(fires, axis=1), K - 1) if K > 1 else np.zeros(x.shape[0], int)
        return self.outputs[level]

    def inverse(self) -> np.ndarray:
        """Map old label -> position in the list."""
        inv = np.empty_like(self.outputs)
        inv[self.outputs] = np.arange(self.outputs.shape[0])
        return inv


def _logistic_objective(w: np.ndarray, U: np.ndarray, y: np.ndarray, precision: float):
    u = U @ w
    nll = -float(np.sum(y * log_expit(u) + (1 - y) * log_expit(-u)))
    return nll + 0.5 * precision * float(w @ w)


def _logistic_grad(w, U, y, precision):
    p = np.exp(log_expit(U @ w))
    return U.T @ (p - y) + precision * w


def _logistic_hess(w, U, y, precision):
    u = U @ w
    s = np.exp(log_expit(u) + log_expit(-u))
    return (U * s[:, None]).T @ U + precision * np.eye(U.shape[1])


def fit_logistic(U: np.ndarray, y: np.ndarray, config: InitConfig) -> tuple[np.ndarray, float]:
    """MAP logistic regression by trust-region Newton; returns (w, log likelihood)."""
    lam = config.logistic_prior_precision
    res = optimize.minimize(_logistic_objective, np.zeros(U.shape[1]), args=(U, y, lam),
                            jac=_logistic_grad, hess=_logistic_hess, method='trust-exact',
                            options={'maxiter': config.logistic_max_iters, 'gtol': config.logistic_gtol})
    w = res.x
    u = U @ w
    return w, float(np.sum(y * log_expit(u) + (1 - y) * log_expit(-u)))


def fit_decision_list(x: np.ndarray, z_next: np.ndarray, K: int, config: Optional[InitConfig] = None,
                      n_jobs: int = 1) -> DecisionList:
    """Greedy fit on pairs (x_t, z_{t+1}).

    At each level every remaining state gets a one-vs-rest logistic
    regression on the remaining rows; the best by log likelihood is fixed
    and its rows removed. A level whose rows are all one class (or empty)
    fixes the majority state with a constant-true predicate.
    """
    config = config or InitConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z_next = np.asarray(z_next, dtype=int)
    if x.shape[0] != z_next.shape[0]:
        raise ValidationError(f'{x.shape[0]} inputs for {z_next.shape[0]} labels')
    U = np.hstack([x, np.ones((x.shape[0], 1))])
    remaining = list(range(K))
    rows = np.ones(x.shape[0], dtype=bool)
    outputs, weights = [], []
    with Parallel(n_jobs=n_jobs) as parallel:
        for _ in range(K - 1):
            labels = z_next[rows]
            present = [k for k in remaining if np.any(labels == k)]
            if len(present) < 2:
                counts = [np.sum(labels == k) for k in remaining]
                best = remaining[int(np.argmax(counts))]
                w = np.zeros(U.shape[1])
                w[-1] = CONSTANT_LOGIT
                logger.debug(f'decision list: degenerate level, fixing state {best}')
            else:
                fits = parallel(delayed(fit_logistic)(U[rows], (labels == k).astype(float), config)
                                for k in remaining)
                idx = int(np.argmax([ll for _, ll in fits]))
                best, w = remaining[idx], fits[idx][0]
            outputs.append(best)
            weights.append(w)
            remaining.remove(best)
            rows &= z_next != best
    outputs.extend(remaining)
    return DecisionList(outputs=np.array(outputs, dtype=int),
                        weights=np.array(weights).reshape(K - 1, U.shape[1]))


def fit_ordered_decision_list(x: np.ndarray, z_next: np.ndarray, outputs: Sequence[int],
                              config: Optional[InitConfig] = None) -> tuple[DecisionList, float]:
    """Predicates for a fixed output order and the summed log likelihood of its levels.

    Levels with no rows left get a constant-true predicate and contribute 0.
    """
    config = config or InitConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z_next = np.asarray(z_next, dtype=int)
    outputs = np.asarray(outputs, dtype=int)
    U = np.hstack([x, np.ones((x.shape[0], 1))])
    rows = np.ones(x.shape[0], dtype=bool)
    weights, total = [], 0.0
    for k in outputs[:-1]:
        if rows.any():
            w, ll = fit_logistic(U[rows], (z_next[rows] == k).astype(float), config)
        else:
            w, ll = np.zeros(U.shape[1]), 0.0
            w[-1] = CONSTANT_LOGIT
        weights.append(w)
        total += ll
        rows &= z_next != k
    dl = DecisionList(outputs=outputs, weights=np.array(weights).reshape(len(outputs) - 1, U.shape[1]))
    return dl, float(total)


# ============================================================================
# Assembly
# ============================================================================

@dataclass(frozen=True, eq=False)
class InitResult:
    params: ModelParams
    path: LatentPath
    decision_list: Optional[DecisionList] = None
    arhmm_log_likelihoods: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        doc = to_json_dict(self.params)
        paths = path_to_json_dict(self.path)
        doc['x_init'] = paths['x']
        doc['z_init'] = paths['z']
        return doc


def _markov_rows(z: np.ndarray, K: int, alpha: float, transitions: VariantTag) -> np.ndarray:
    counts = np.full((K, K), alpha)
    np.add.at(counts, (z[:-1], z[1:]), 1.0)
    if transitions == VariantTag.STICKY:
        if K == 1:
            return np.ones((1, 1))
        np.fill_diagonal(counts, 0.0)
    return counts / counts.sum(axis=1, keepdims=True)


def _stay_logit(z: np.ndarray) -> float:
    stays = np.mean(z[:-1] == z[1:]) if z.shape[0] > 1 else 0.5
    return float(logit(np.clip(stays, 0.01, 0.99)))


def assemble_init(x: np.ndarray, C: Optional[np.ndarray], d: Optional[np.ndarray], S: Optional[np.ndarray],
                  arhmm: ArhmmFit, decision_list: Optional[DecisionList], variant: VariantTag,
                  transitions: VariantTag, emission_family: EmissionFamily, hypers: Hyperparameters) -> InitResult:
    """Combine the stages into model parameters and a latent path.

    The AR-HMM labels are reordered by the decision list (identity when none
    is given) and each predicate w_j initialises stick j for every state.
    """
    K, M = arhmm.A.shape[0], x.shape[1]
    S_count = n_sticks(K, transitions)
    R, r = np.zeros((K, S_count, M)), np.zeros((K, S_count))
    pi = None
    if transitions == VariantTag.STICKY:
        r[:] = _stay_logit(arhmm.z)
    elif transitions != VariantTag.SLDS and decision_list is not None:
        R[:] = decision_list.weights[:, :M]
        r[:] = decision_list.weights[:, M]
    if transitions in (VariantTag.SLDS, VariantTag.STICKY):
        pi = _markov_rows(arhmm.z, K, hypers.alpha, transitions)
    Q = np.stack([q + COVARIANCE_FLOOR * np.eye(M) for q in arhmm.Q])
    for q in Q:
        safe_cholesky(q, 'initial dynamics covariance')
    params = ModelParams(A=arhmm.A.copy(), b=arhmm.b.copy(), Q=Q, C=C, d=d, S=S, R=R, r=r, pi=pi,
                         variant=variant, emission_family=emission_family, transitions=transitions)
    z = arhmm.z
    if decision_list is not None and transitions != VariantTag.SLDS:
        perm = decision_list.outputs
        # recurrence rows are already in list order; relabel only the state-indexed blocks
        relabelled = permute_states(params.with_updates(R=np.zeros_like(R), r=np.zeros_like(r)), perm)
        params = relabelled.with_updates(R=R, r=r)
        z = decision_list.inverse()[z]
    return InitResult(params=params, path=LatentPath(z=z, x=x), decision_list=decision_list,
                      arhmm_log_likelihoods=list(arhmm.log_likelihoods))


def initialize_model(data: Dataset, K: int, M: int, variant: VariantTag, rng: np.random.Generator,
                     transitions: Optional[VariantTag] = None, config: Optional[InitConfig] = None,
                     hypers: Optional[Hyperparameters] = None) -> InitResult:
    """Run all three stages for ``data``."""
    config = config or InitConfig()
    variant = VariantTag(variant)
    transitions = transitions or (VariantTag.RSLDS if variant == VariantTag.RARHMM else variant)
    hypers = hypers or default_hypers(K, M, data.N, variant, transitions)
    if variant == VariantTag.RARHMM:
        if data.N != M:
            raise ValidationError(f'rarhmm observes x directly, so M must equal N = {data.N}')
        if not np.all(data.mask):
            raise ValidationError('rarhmm needs fully observed data')
        x, C, d, S = data.y.copy(), None, None, None
    else:
        x, C, d, S = ppca_init(data, M, config)
    arhmm = arhmm_init(x, K, config.n_arhmm_iters, rng, config.arhmm_sticky)
    decision_list = None
    if transitions not in (VariantTag.SLDS, VariantTag.STICKY) and K > 1:
        decision_list = fit_decision_list(x[:-1], arhmm.z[1:], K, config)
        logger.info(f'Decision list order: {decision_list.outputs.tolist()}')
    return assemble_init(x, C, d, S, arhmm, decision_list, variant, transitions, data.emission_family, hypers)
