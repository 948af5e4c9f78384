"""Samplers and conjugate-update kernels.

Pólya-gamma, matrix-normal-inverse-Wishart (MNIW), Dirichlet and
information-form Gaussian algebra. Every sampler takes an explicit
``numpy.random.Generator``.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from polyagamma import random_polyagamma
from scipy import linalg, special, stats

from rslds.errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


# ============================================================================
# Linear algebra helpers
# ============================================================================

def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def safe_cholesky(A: np.ndarray, what: str = 'matrix', jitter: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    The input is symmetrised first. With ``jitter`` a failed factorisation is
    retried once with ``1e-8 * trace / p`` added to the diagonal; without it,
    or on a second failure, NumericalError is raised.
    """
    A = symmetrize(np.asarray(A, dtype=float))
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        if not jitter:
            raise NumericalError(f'{what} is not positive definite') from exc
        p = A.shape[-1]
        eps = 1e-8 * np.trace(A) / p
        if not np.isfinite(eps) or eps <= 0:
            raise NumericalError(f'{what} is not positive definite')
        logger.warning(f'⚠️ Cholesky of {what} failed, retrying with jitter {eps:.3g}')
        try:
            return np.linalg.cholesky(A + eps * np.eye(p))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f'{what} is not positive definite after jitter') from exc


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((L, True), B)


def chol_inv(A: np.ndarray, what: str = 'matrix', jitter: bool = True) -> np.ndarray:
    L = safe_cholesky(A, what, jitter)
    return symmetrize(chol_solve(L, np.eye(A.shape[-1])))


def chol_logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of N(mean, cov) evaluated row-wise.

    ``x`` and ``mean`` broadcast against each other over leading axes; ``cov``
    is a single covariance. A singular covariance raises NumericalError.
    """
    cov = np.atleast_2d(cov)
    L = safe_cholesky(cov, 'covariance', jitter=False)
    resid = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(mean, dtype=float))
    flat = resid.reshape(-1, cov.shape[0])
    z = linalg.solve_triangular(L, flat.T, lower=True)
    out = -0.5 * np.sum(z ** 2, axis=0) - 0.5 * chol_logdet(L) - 0.5 * cov.shape[0] * LOG_2PI
    return out.reshape(resid.shape[:-1]) if resid.ndim > 1 else float(out[0])


# ============================================================================
# Pólya-gamma
# ============================================================================

def sample_pg(b, c, rng: np.random.Generator):
    """Draw PG(b, c) variates.

    ``b`` and ``c`` broadcast. Entries with ``b == 0`` are the point mass at
    zero and are returned without drawing. Integer ``b`` uses the exact
    Devroye sampler, which sums ``b`` independent PG(1, c) draws.

    Raises:
        NumericalError: If any tilt is not finite
        ValidationError: If any shape is negative or non-integer
    """
    b, c = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(c, dtype=float))
    if not np.all(np.isfinite(c)):
        raise NumericalError('Pólya-gamma tilt must be finite')
    if np.any(b < 0) or np.any(b != np.round(b)):
        raise ValidationError('Pólya-gamma shape must be a nonnegative integer')
    out = np.zeros(b.shape)
    active = b > 0
    if np.any(active):
        out[active] = random_polyagamma(b[active], c[active], method='devroye', random_state=rng)
    return out if out.ndim else float(out)


def pg_mean(b, c):
    """E[PG(b, c)] = b / (2c) tanh(c / 2), with the series b (1/4 - c^2/48) near 0."""
    b, c = np.broadcast_arrays(np.asarray(b, dtype=float), np.abs(np.asarray(c, dtype=float)))
    small = c < 1e-4
    safe_c = np.where(small, 1.0, c)
    out = np.where(small, b * (0.25 - c ** 2 / 48.0), b / (2.0 * safe_c) * np.tanh(safe_c / 2.0))
    return out if out.ndim else float(out)


def pg_variance(b, c):
    """Var[PG(b, c)] = b / (4c^3) (sinh c - c) / cosh^2(c/2); b/24 at c = 0."""
    b, c = np.broadcast_arrays(np.asarray(b, dtype=float), np.abs(np.asarray(c, dtype=float)))
    small = c < 1e-3
    safe_c = np.where(small, 1.0, c)
    th = np.tanh(safe_c / 2.0)
    # sinh(c) / cosh^2(c/2) = 2 tanh(c/2), rewritten to stay finite for large c
    big = b / (4.0 * safe_c ** 3) * (2.0 * th - safe_c * (1.0 - th ** 2))
    out = np.where(small, b / 24.0 * (1.0 - c ** 2 / 5.0), big)
    return out if out.ndim else float(out)


# ============================================================================
# Matrix-normal-inverse-Wishart
# ============================================================================

@dataclass(frozen=True, eq=False)
class MNIWParams:
    """MNIW(M0, V0, S0, n0) over (W, Sigma) with W | Sigma ~ MN(M0, Sigma, V0).

    Attributes:
        M0: Mean matrix (p x q)
        V0: Column covariance (q x q)
        S0: Inverse-Wishart scale (p x p)
        n0: Inverse-Wishart degrees of freedom, greater than p - 1
    """
    M0: np.ndarray
    V0: np.ndarray
    S0: np.ndarray
    n0: float

    def __post_init__(self):
        p, q = np.shape(self.M0)
        if np.shape(self.V0) != (q, q) or np.shape(self.S0) != (p, p):
            raise ValidationError(
                f'MNIW shapes inconsistent: M0 {np.shape(self.M0)}, V0 {np.shape(self.V0)}, S0 {np.shape(self.S0)}')
        if self.n0 <= p - 1:
            raise ValidationError(f'MNIW dof {self.n0} must exceed p - 1 = {p - 1}')

    @property
    def p(self) -> int:
        return self.M0.shape[0]

    @property
    def q(self) -> int:
        return self.M0.shape[1]


@dataclass(frozen=True, eq=False)
class MNIWStats:
    """Sufficient statistics of a weighted linear-Gaussian regression y ~ W x."""
    xx: np.ndarray
    yx: np.ndarray
    yy: np.ndarray
    n: float

    @classmethod
    def from_rows(cls, xs: np.ndarray, ys: np.ndarray, weights: Optional[np.ndarray] = None) -> 'MNIWStats':
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        if xs.shape[0] != ys.shape[0]:
            raise ValidationError(f'row counts differ: {xs.shape[0]} regressors vs {ys.shape[0]} responses')
        w = np.ones(xs.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        wx = xs * w[:, None]
        return cls(xx=xs.T @ wx, yx=ys.T @ wx, yy=ys.T @ (ys * w[:, None]), n=float(w.sum()))

    @classmethod
    def zeros(cls, p: int, q: int) -> 'MNIWStats':
        return cls(np.zeros((q, q)), np.zeros((p, q)), np.zeros((p, p)), 0.0)

    def __add__(self, other: 'MNIWStats') -> 'MNIWStats':
        return MNIWStats(self.xx + other.xx, self.yx + other.yx, self.yy + other.yy, self.n + other.n)

    def scale(self, s: float) -> 'MNIWStats':
        return MNIWStats(s * self.xx, s * self.yx, s * self.yy, s * self.n)


@dataclass(frozen=True, eq=False)
class MNIWNatural:
    """MNIW natural parameters: (V^-1, M V^-1, S + M V^-1 M^T, n)."""
    J: np.ndarray
    H: np.ndarray
    Y: np.ndarray
    n: float

    def __add__(self, other):
        if isinstance(other, MNIWStats):
            return MNIWNatural(self.J + other.xx, self.H + other.yx, self.Y + other.yy, self.n + other.n)
        return MNIWNatural(self.J + other.J, self.H + other.H, self.Y + other.Y, self.n + other.n)

    def scale(self, s: float) -> 'MNIWNatural':
        return MNIWNatural(s * self.J, s * self.H, s * self.Y, s * self.n)


def to_natural(params: MNIWParams) -> MNIWNatural:
    J = chol_inv(params.V0, 'MNIW column covariance')
    H = params.M0 @ J
    return MNIWNatural(J=J, H=H, Y=symmetrize(params.S0 + H @ params.M0.T), n=float(params.n0))


def from_natural(nat: MNIWNatural) -> MNIWParams:
    L = safe_cholesky(nat.J, 'MNIW natural precision')
    V = symmetrize(chol_solve(L, np.eye(nat.J.shape[0])))
    M = nat.H @ V
    S = symmetrize(nat.Y - M @ nat.H.T)
    return MNIWParams(M0=M, V0=V, S0=S, n0=nat.n)


def mniw_posterior(prior: MNIWParams, xs: np.ndarray, ys: np.ndarray,
                   weights: Optional[np.ndarray] = None) -> MNIWParams:
    """Conjugate MNIW posterior for the regression ``ys[t] ~ N(W xs[t], Sigma)``.

    Args:
        prior: Prior over (W, Sigma)
        xs: Regressor rows (n x q)
        ys: Response rows (n x p)
        weights: Optional nonnegative row weights (expected counts)

    Returns:
        The posterior; the prior object itself when there are no rows.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1, prior.q)
    ys = np.asarray(ys, dtype=float).reshape(-1, prior.p) if np.size(ys) else np.zeros((0, prior.p))
    if xs.shape[0] != ys.shape[0]:
        raise ValidationError(f'row counts differ: {xs.shape[0]} regressors vs {ys.shape[0]} responses')
    if xs.shape[0] == 0:
        return prior
    return mniw_posterior_from_stats(prior, MNIWStats.from_rows(xs, ys, weights))


def mniw_posterior_from_stats(prior: MNIWParams, stats: MNIWStats) -> MNIWParams:
    if stats.xx.shape != (prior.q, prior.q) or stats.yx.shape != (prior.p, prior.q):
        raise ValidationError(
            f'statistics shape {stats.yx.shape} does not match prior ({prior.p}, {prior.q})')
    if stats.n == 0:
        return prior
    return from_natural(to_natural(prior) + stats)


def sample_mniw(params: MNIWParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (W, Sigma) with Sigma ~ IW(S0, n0) and W | Sigma ~ MN(M0, Sigma, V0)."""
    p = params.p
    Sigma = stats.invwishart.rvs(df=params.n0, scale=symmetrize(params.S0), random_state=rng)
    Sigma = symmetrize(np.atleast_2d(Sigma).reshape(p, p))
    L_sigma = safe_cholesky(Sigma, 'sampled covariance')
    L_v = safe_cholesky(params.V0, 'MNIW column covariance')
    Z = rng.standard_normal(params.M0.shape)
    return params.M0 + L_sigma @ Z @ L_v.T, Sigma


def sample_matrix_normal_fixed_cov(M0: np.ndarray, Sigma: np.ndarray, V0: np.ndarray,
                                   rng: np.random.Generator) -> np.ndarray:
    L_sigma = safe_cholesky(Sigma, 'row covariance')
    L_v = safe_cholesky(V0, 'column covariance')
    return M0 + L_sigma @ rng.standard_normal(M0.shape) @ L_v.T


@dataclass(frozen=True, eq=False)
class MNIWExpectations:
    """Moments of an MNIW distribution used by variational updates."""
    sigma_inv: np.ndarray
    sigma_inv_w: np.ndarray
    wt_sigma_inv_w: np.ndarray
    log_det_sigma_inv: float


def mniw_expectations(params: MNIWParams) -> MNIWExpectations:
    p = params.p
    S_inv = chol_inv(params.S0, 'MNIW scale')
    E_sigma_inv = params.n0 * S_inv
    E_sigma_inv_w = E_sigma_inv @ params.M0
    E_wt = p * params.V0 + params.M0.T @ E_sigma_inv_w
    log_det = (float(np.sum(special.digamma((params.n0 + 1 - np.arange(1, p + 1)) / 2.0)))
               + p * np.log(2.0) - chol_logdet(safe_cholesky(params.S0, 'MNIW scale')))
    return MNIWExpectations(E_sigma_inv, E_sigma_inv_w, symmetrize(E_wt), log_det)


def mniw_log_density(W: np.ndarray, Sigma: np.ndarray, params: MNIWParams) -> float:
    log_iw = stats.invwishart.logpdf(Sigma if params.p > 1 else Sigma.item(),
                                     df=params.n0, scale=params.S0 if params.p > 1 else params.S0.item())
    log_mn = stats.matrix_normal.logpdf(W, mean=params.M0, rowcov=Sigma, colcov=params.V0)
    return float(log_iw + log_mn)


def mniw_mean(params: MNIWParams) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean point estimate: (M0, S0 / (n0 - p - 1)), falling back to the mode scale."""
    denom = params.n0 - params.p - 1
    if denom <= 0:
        denom = params.n0 + params.p + 1
    return params.M0.copy(), params.S0 / denom


def mniw_expected_log_density(q: MNIWParams, p: MNIWParams) -> float:
    """E_q[ln MNIW(W, Sigma | p)] in closed form."""
    E = mniw_expectations(q)
    P, Q = p.p, p.q
    Lv = safe_cholesky(p.V0, 'MNIW column covariance')
    Ls = safe_cholesky(p.S0, 'MNIW scale')
    quad = (E.wt_sigma_inv_w - p.M0.T @ E.sigma_inv_w - E.sigma_inv_w.T @ p.M0
            + p.M0.T @ E.sigma_inv @ p.M0)
    log_iw = (0.5 * p.n0 * chol_logdet(Ls) - 0.5 * p.n0 * P * np.log(2.0) - special.multigammaln(0.5 * p.n0, P)
              + 0.5 * (p.n0 + P + 1) * E.log_det_sigma_inv - 0.5 * np.trace(p.S0 @ E.sigma_inv))
    log_mn = (-0.5 * P * Q * LOG_2PI + 0.5 * Q * E.log_det_sigma_inv - 0.5 * P * chol_logdet(Lv)
              - 0.5 * np.trace(chol_solve(Lv, quad)))
    return float(log_iw + log_mn)


def mniw_kl(q: MNIWParams, p: MNIWParams) -> float:
    return mniw_expected_log_density(q, q) - mniw_expected_log_density(q, p)


# ============================================================================
# Dirichlet
# ============================================================================

@dataclass(frozen=True, eq=False)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'alpha', np.asarray(self.alpha, dtype=float))
        if np.any(self.alpha <= 0):
            raise ValidationError('Dirichlet concentration must be positive')

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


def dirichlet_posterior(prior: DirichletParams, counts: Sequence[float]) -> DirichletParams:
    counts = np.asarray(counts, dtype=float)
    if counts.shape != prior.alpha.shape:
        raise ValidationError(f'count shape {counts.shape} does not match {prior.alpha.shape}')
    if np.any(counts < 0):
        raise ValidationError('Dirichlet counts must be nonnegative')
    return DirichletParams(alpha=prior.alpha + counts)


def sample_dirichlet(params: DirichletParams, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(params.alpha)


def dirichlet_expected_log(params: DirichletParams) -> np.ndarray:
    return special.digamma(params.alpha) - special.digamma(params.alpha.sum())


def dirichlet_log_density(pi: np.ndarray, params: DirichletParams) -> float:
    return float(stats.dirichlet.logpdf(np.clip(pi, 1e-300, None), params.alpha))


def dirichlet_expected_log_density(q: DirichletParams, p: DirichletParams) -> float:
    """E_q[ln Dir(pi | p)] in closed form."""
    a = p.alpha
    return float(special.gammaln(a.sum()) - np.sum(special.gammaln(a)) + (a - 1.0) @ dirichlet_expected_log(q))


def dirichlet_kl(q: DirichletParams, p: DirichletParams) -> float:
    return dirichlet_expected_log_density(q, q) - dirichlet_expected_log_density(q, p)


# ============================================================================
# Information-form Gaussians
# ============================================================================

@dataclass(frozen=True, eq=False)
class GaussianInfo:
    """Unnormalised Gaussian factor exp(-1/2 x^T J x + h^T x - log_normalizer)."""
    J: np.ndarray
    h: np.ndarray
    log_normalizer: float = 0.0

    def __post_init__(self):
        n = np.shape(self.h)[0]
        if np.shape(self.J) != (n, n):
            raise ValidationError(f'precision shape {np.shape(self.J)} does not match h of length {n}')

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @classmethod
    def from_moments(cls, mean: np.ndarray, cov: np.ndarray) -> 'GaussianInfo':
        J = chol_inv(np.atleast_2d(cov), 'covariance')
        return cls(J=J, h=J @ np.atleast_1d(mean)).normalized()

    def multiply(self, *others: 'GaussianInfo') -> 'GaussianInfo':
        J, h, ln = self.J, self.h, self.log_normalizer
        for other in others:
            if other.dim != self.dim:
                raise ValidationError(f'cannot multiply factors of dimension {self.dim} and {other.dim}')
            J, h, ln = J + other.J, h + other.h, ln + other.log_normalizer
        return GaussianInfo(J=symmetrize(J), h=h, log_normalizer=ln)

    def marginalize(self, eliminate: Sequence[int]) -> 'GaussianInfo':
        """Integrate out the coordinates in ``eliminate`` (Schur complement)."""
        b = np.asarray(eliminate, dtype=int)
        a = np.setdiff1d(np.arange(self.dim), b)
        Jaa, Jab, Jbb = self.J[np.ix_(a, a)], self.J[np.ix_(a, b)], self.J[np.ix_(b, b)]
        L = safe_cholesky(Jbb, 'eliminated precision block', jitter=False)
        Jbb_inv_hb = chol_solve(L, self.h[b])
        Jbb_inv_Jba = chol_solve(L, Jab.T)
        J = symmetrize(Jaa - Jab @ Jbb_inv_Jba)
        h = self.h[a] - Jab @ Jbb_inv_hb
        log_int = 0.5 * self.h[b] @ Jbb_inv_hb + 0.5 * len(b) * LOG_2PI - 0.5 * chol_logdet(L)
        return GaussianInfo(J=J, h=h, log_normalizer=self.log_normalizer - log_int)

    def condition(self, fixed: Sequence[int], value: np.ndarray) -> 'GaussianInfo':
        """Clamp the coordinates in ``fixed`` to ``value``."""
        b = np.asarray(fixed, dtype=int)
        a = np.setdiff1d(np.arange(self.dim), b)
        v = np.atleast_1d(np.asarray(value, dtype=float))
        J = self.J[np.ix_(a, a)]
        h = self.h[a] - self.J[np.ix_(a, b)] @ v
        const = -0.5 * v @ self.J[np.ix_(b, b)] @ v + self.h[b] @ v
        return GaussianInfo(J=J, h=h, log_normalizer=self.log_normalizer - const)

    def log_partition(self) -> float:
        """log of the integral of the factor over R^dim."""
        L = safe_cholesky(self.J, 'precision')
        return float(0.5 * self.h @ chol_solve(L, self.h) + 0.5 * self.dim * LOG_2PI
                     - 0.5 * chol_logdet(L) - self.log_normalizer)

    def normalized(self) -> 'GaussianInfo':
        return GaussianInfo(J=self.J, h=self.h, log_normalizer=self.log_normalizer + self.log_partition())

    def to_moments(self) -> tuple[np.ndarray, np.ndarray]:
        cov = chol_inv(self.J, 'precision')
        return cov @ self.h, cov

    def log_density(self, x: np.ndarray) -> float:
        x = np.atleast_1d(x)
        return float(-0.5 * x @ self.J @ x + self.h @ x - self.log_normalizer)
