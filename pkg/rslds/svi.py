"""Structured mean-field variational inference.

The posterior is approximated by q(z) q(x) q(omega) q(theta). q(x) and q(z)
are chain-structured and updated exactly by message passing; q(omega) is
Pólya-gamma with a tilt taken from a sampled discrete path; q(theta) is
conjugate and updated by natural-gradient steps over minibatches of
independent sequences.

Supports Gaussian emissions and the rAR-HMM.
"""

import logging
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_expit

from rslds.distributions import (
    LOG_2PI,
    DirichletParams,
    MNIWExpectations,
    MNIWParams,
    MNIWStats,
    chol_inv,
    dirichlet_expected_log,
    dirichlet_kl,
    dirichlet_log_density,
    from_natural,
    gaussian_logpdf,
    mniw_expectations,
    mniw_kl,
    mniw_log_density,
    mniw_mean,
    pg_mean,
    sample_dirichlet,
    sample_mniw,
    symmetrize,
    to_natural,
)
from rslds.errors import NumericalError, ValidationError
from rslds.gibbs import score_joint
from rslds.messages import (
    DiscreteChainSpec,
    GaussianChainSpec,
    HMMMarginals,
    SmootherResult,
    ffbs_continuous,
    ffbs_discrete,
    hmm_marginals,
    smoother_moments,
    uniform_log_init,
)
from rslds.model import (
    Dataset,
    EmissionFamily,
    Hyperparameters,
    LatentPath,
    ModelParams,
    RecurrenceLayout,
    VariantTag,
    recurrence_logits,
    stick_outcomes,
)
from rslds.serialization import write_csv
from rslds.settings import FILES, SviConfig
from rslds.stickbreak import log_pi_sb, stick_indicators

logger = logging.getLogger(__name__)


# ============================================================================
# Global factor q(theta)
# ============================================================================

@dataclass(eq=False)
class VariationalState:
    """Global variational factors.

    Attributes:
        template: Parameters fixing sizes, variant and transition structure
        q_dyn: Per-state MNIW over [A_k | b_k], Q_k
        q_obs: MNIW over [C | d], S; None for the rAR-HMM
        rec_J, rec_h: Natural parameters (n_groups, n_sticks, D, D) and
            (n_groups, n_sticks, D) of the Gaussian recurrence rows
        markov_alpha: Dirichlet concentrations (K, K) of Markov or leave rows
    """
    template: ModelParams
    q_dyn: list
    q_obs: Optional[MNIWParams]
    rec_J: Optional[np.ndarray]
    rec_h: Optional[np.ndarray]
    markov_alpha: Optional[np.ndarray]

    @property
    def layout(self) -> Optional[RecurrenceLayout]:
        return RecurrenceLayout.for_params(self.template) if self.template.is_recurrent else None

    @classmethod
    def from_params(cls, params: ModelParams, concentration: float = 1e4) -> 'VariationalState':
        """q(theta) concentrated around ``params``; larger ``concentration`` is closer to a point mass."""
        check_supported(params)
        K, M = params.K, params.M

        def concentrated(W, Sigma):
            p, q = W.shape
            n0 = concentration + p + 1
            return MNIWParams(M0=W, V0=np.eye(q) / concentration, S0=Sigma * concentration, n0=n0)

        q_dyn = [concentrated(np.hstack([params.A[k], params.b[k][:, None]]), params.Q[k]) for k in range(K)]
        q_obs = None
        if params.variant != VariantTag.RARHMM:
            q_obs = concentrated(np.hstack([params.C, params.d[:, None]]), params.S)
        rec_J = rec_h = None
        if params.is_recurrent:
            layout = RecurrenceLayout.for_params(params)
            W = layout.pack(params.R, params.r)
            rec_J = np.broadcast_to(concentration * np.eye(layout.D), W.shape + (layout.D,)).copy()
            rec_h = concentration * W
        alpha = None
        if params.transitions in (VariantTag.SLDS, VariantTag.STICKY):
            alpha = concentration * params.pi + 1e-3
        return cls(template=params, q_dyn=q_dyn, q_obs=q_obs, rec_J=rec_J, rec_h=rec_h, markov_alpha=alpha)

    def recurrence_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Means (G, S, D) and covariances (G, S, D, D) of the recurrence rows."""
        covs = np.linalg.inv(self.rec_J)
        covs = symmetrize(covs)
        return np.einsum('gsde,gse->gsd', covs, self.rec_h), covs

    def mean_params(self) -> ModelParams:
        """Point estimate at the means of q(theta)."""
        p = self.template
        A, b, Q = p.A.copy(), p.b.copy(), p.Q.copy()
        for k, q in enumerate(self.q_dyn):
            W, Sigma = mniw_mean(q)
            A[k], b[k], Q[k] = W[:, :p.M], W[:, p.M], Sigma
        updates = dict(A=A, b=b, Q=Q)
        if self.q_obs is not None:
            W, S = mniw_mean(self.q_obs)
            updates.update(C=W[:, :p.M], d=W[:, p.M], S=S)
        if self.rec_J is not None:
            means, _ = self.recurrence_moments()
            updates['R'], updates['r'] = self.layout.unpack(means)
        if self.markov_alpha is not None:
            updates['pi'] = _dirichlet_rows_mean(self.markov_alpha, p.transitions)
        return p.with_updates(**updates)


def check_supported(params: ModelParams):
    if params.variant != VariantTag.RARHMM and params.emission_family != EmissionFamily.GAUSSIAN:
        raise ValidationError('variational inference supports Gaussian emissions and the rAR-HMM only')


def _offdiag(K: int) -> np.ndarray:
    return ~np.eye(K, dtype=bool)


def _dirichlet_rows_mean(alpha: np.ndarray, transitions: VariantTag) -> np.ndarray:
    K = alpha.shape[0]
    if transitions == VariantTag.STICKY:
        if K == 1:
            return np.ones((1, 1))
        a = np.where(_offdiag(K), alpha, 0.0)
    else:
        a = alpha
    return a / a.sum(axis=1, keepdims=True)


def _prior_state(params: ModelParams, hypers: Hyperparameters) -> dict:
    """Prior natural parameters in the same layout as VariationalState."""
    K = params.K
    prior = {'dyn': to_natural(hypers.dynamics),
             'obs': None if params.variant == VariantTag.RARHMM else to_natural(hypers.emissions)}
    if params.is_recurrent:
        layout = RecurrenceLayout.for_params(params)
        mean0, cov0 = layout.prior(hypers.recurrence)
        P0 = chol_inv(cov0, 'recurrence prior covariance')
        prior['rec_J'] = np.broadcast_to(P0, mean0.shape + (layout.D,)).copy()
        prior['rec_h'] = np.einsum('de,gse->gsd', P0, mean0)
    if params.transitions == VariantTag.SLDS:
        prior['alpha'] = np.full((K, K), hypers.alpha)
    elif params.transitions == VariantTag.STICKY:
        prior['alpha'] = np.where(_offdiag(K), hypers.alpha, 1.0)
    return prior


# ============================================================================
# Expectations under q(theta)
# ============================================================================

@dataclass(frozen=True, eq=False)
class ThetaExpectations:
    """Moments of q(theta) in the form the local updates consume.

    Recurrence moments are projected onto [x; 1] for each conditioning
    state: rec_w (K, S, M+1) and rec_ww (K, S, M+1, M+1).
    """
    dyn: list
    obs: Optional[MNIWExpectations]
    rec_w: Optional[np.ndarray]
    rec_ww: Optional[np.ndarray]
    log_pi: Optional[np.ndarray]


def theta_expectations(vs: VariationalState) -> ThetaExpectations:
    dyn = [mniw_expectations(q) for q in vs.q_dyn]
    obs = None if vs.q_obs is None else mniw_expectations(vs.q_obs)
    rec_w = rec_ww = None
    if vs.rec_J is not None:
        layout = vs.layout
        means, covs = vs.recurrence_moments()
        second = covs + np.einsum('gsd,gse->gsde', means, means)
        groups = [layout.group_of(i) for i in range(layout.K)]
        B = layout.projections()
        rec_w = np.einsum('kdm,ksd->ksm', B, means[groups])
        rec_ww = np.einsum('kdm,ksde,ken->ksmn', B, second[groups], B)
    log_pi = None
    if vs.markov_alpha is not None:
        K = vs.template.K
        if vs.template.transitions == VariantTag.SLDS:
            log_pi = np.stack([dirichlet_expected_log(DirichletParams(a)) for a in vs.markov_alpha])
        else:
            log_pi = np.zeros((K, K))
            for k in range(K):
                others = np.delete(np.arange(K), k)
                if others.size:
                    log_pi[k, others] = dirichlet_expected_log(DirichletParams(vs.markov_alpha[k, others]))
    return ThetaExpectations(dyn=dyn, obs=obs, rec_w=rec_w, rec_ww=rec_ww, log_pi=log_pi)


# ============================================================================
# Local factors
# ============================================================================

@dataclass(eq=False)
class LocalState:
    """Local variational factors of one sequence.

    Attributes:
        smoother: Moments of q(x)
        qz: Marginals of q(z)
        qz_spec: Chain factors defining q(z); None before the first q(z) update
        qx_spec: Chain factors defining q(x); None for the rAR-HMM
        e_omega: (T-1, n_sticks) E_q[omega]
    """
    smoother: SmootherResult
    qz: HMMMarginals
    qz_spec: Optional[DiscreteChainSpec]
    qx_spec: Optional[GaussianChainSpec]
    e_omega: np.ndarray


def point_smoother(x: np.ndarray) -> SmootherResult:
    T, M = x.shape
    return SmootherResult(means=x.copy(), covs=np.zeros((T, M, M)), cross_covs=np.zeros((max(T - 1, 0), M, M)),
                          log_normalizer=0.0)


def _one_hot_marginals(z: np.ndarray, K: int) -> HMMMarginals:
    T = z.shape[0]
    unary = np.zeros((T, K))
    unary[np.arange(T), z] = 1.0
    pairwise = np.zeros((max(T - 1, 0), K, K))
    pairwise[np.arange(T - 1), z[:-1], z[1:]] = 1.0
    return HMMMarginals(unary=unary, pairwise=pairwise, log_normalizer=0.0)


def init_local(params: ModelParams, path: LatentPath, data: Dataset) -> LocalState:
    """Local factors concentrated on ``path``, with E[omega] at the path's logits."""
    check_supported(params)
    x = data.y.copy() if params.variant == VariantTag.RARHMM else path.x
    smoother = point_smoother(x)
    qz = _one_hot_marginals(path.z, params.K)
    S = params.n_sticks
    e_omega = np.zeros((max(path.T - 1, 0), S))
    if params.is_recurrent and path.T > 1:
        nu = recurrence_logits(params, x[:-1], path.z[:-1])
        reached, _ = stick_indicators(stick_outcomes(params, path.z[:-1], path.z[1:]), S)
        e_omega = pg_mean(reached, nu)
    return LocalState(smoother=smoother, qz=qz, qz_spec=None, qx_spec=None, e_omega=e_omega)


def augmented_moments(sm: SmootherResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """E[x~ x~^T] (T, M+1, M+1), E[x~_t x_{t+1}^T] (T-1, M+1, M) and E[x~] (T, M+1) with x~ = [x; 1]."""
    T, M = sm.means.shape
    mu = np.hstack([sm.means, np.ones((T, 1))])
    Exx = np.einsum('ti,tj->tij', mu, mu)
    Exx[:, :M, :M] += sm.covs
    cross = np.zeros((max(T - 1, 0), M + 1, M))
    if T > 1:
        cross[:, :M, :] = sm.cross_moments
        cross[:, M, :] = sm.means[1:]
    return Exx, cross, mu


def _kappa_table(params: ModelParams) -> np.ndarray:
    """kappa for every (z_t, z_{t+1}) pair: (K, K, n_sticks)."""
    K = params.K
    i, j = np.meshgrid(np.arange(K), np.arange(K), indexing='ij')
    _, kappa = stick_indicators(stick_outcomes(params, i, j), params.n_sticks)
    return kappa


def update_qx(vs: VariationalState, local: LocalState, data: Dataset,
              E: Optional[ThetaExpectations] = None) -> LocalState:
    """Rebuild q(x) from expected potentials mixed over q(z), then smooth."""
    params = vs.template
    if params.variant == VariantTag.RARHMM:
        return local
    E = E or theta_expectations(vs)
    T, M, K = data.T, params.M, params.K
    gamma, pair = local.qz.unary, local.qz.pairwise

    Esi = np.stack([e.sigma_inv for e in E.dyn])
    Esiw = np.stack([e.sigma_inv_w for e in E.dyn])
    Ewsw = np.stack([e.wt_sigma_inv_w for e in E.dyn])
    logdet = np.array([e.log_det_sigma_inv for e in E.dyn])
    g = gamma[1:]
    J22 = np.einsum('tk,kij->tij', g, Esi)
    J12 = -np.einsum('tk,kij->tji', g, Esiw[:, :, :M])
    J11 = np.einsum('tk,kij->tij', g, Ewsw[:, :M, :M])
    h1 = -np.einsum('tk,ki->ti', g, Ewsw[:, :M, M])
    h2 = np.einsum('tk,ki->ti', g, Esiw[:, :, M])
    const = float(np.sum(g @ (-0.5 * Ewsw[:, M, M] + 0.5 * logdet - 0.5 * M * LOG_2PI)))

    obs = E.obs
    mask = data.mask
    J_node = np.where(mask[:, None, None], obs.wt_sigma_inv_w[None, :M, :M], 0.0)
    h_node = (data.y @ obs.sigma_inv_w[:, :M] - obs.wt_sigma_inv_w[None, :M, M]) * mask[:, None]
    yy = np.einsum('ti,ij,tj->t', data.y, obs.sigma_inv, data.y)
    const += float(np.sum(mask * (-0.5 * yy + data.y @ obs.sigma_inv_w[:, M] - 0.5 * obs.wt_sigma_inv_w[M, M]
                                  + 0.5 * obs.log_det_sigma_inv - 0.5 * data.N * LOG_2PI)))

    if params.is_recurrent and T > 1:
        P = np.einsum('ti,ts,isde->tde', gamma[:-1], local.e_omega, E.rec_ww)
        lin = np.einsum('tij,ijs,isd->td', pair, _kappa_table(params), E.rec_w)
        J_node[:-1] += P[:, :M, :M]
        h_node[:-1] += lin[:, :M] - P[:, :M, M]
        const += float(np.sum(lin[:, M] - 0.5 * P[:, M, M]))

    spec = GaussianChainSpec(J_init=np.eye(M), h_init=np.zeros(M), J_node=J_node, h_node=h_node,
                             J11=J11, J12=J12, J22=J22, h1=h1, h2=h2,
                             log_const=const - 0.5 * M * LOG_2PI)
    return replace(local, smoother=smoother_moments(spec), qx_spec=spec)


def _sample_marginals(means: np.ndarray, covs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    vals, vecs = np.linalg.eigh(covs)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
    return means + np.einsum('tij,tj->ti', root, rng.standard_normal(means.shape))


def _sample_recurrence_rows(vs: VariationalState, rng: np.random.Generator) -> np.ndarray:
    means, covs = vs.recurrence_moments()
    L = np.linalg.cholesky(covs)
    return means + np.einsum('gsde,gse->gsd', L, rng.standard_normal(means.shape))


def expected_log_transitions(vs: VariationalState, E: ThetaExpectations, sm: SmootherResult,
                             rng: np.random.Generator, n_mc: int) -> np.ndarray:
    """E_q ln p(z_{t+1} = j | z_t = i, x_t), (T-1, K, K).

    Markov rows are exact; stick-breaking terms are averaged over ``n_mc``
    joint draws of x_t and the recurrence weights.
    """
    params = vs.template
    T, K = sm.means.shape[0], params.K
    if params.transitions == VariantTag.SLDS:
        return np.broadcast_to(E.log_pi, (T - 1, K, K)).copy()
    layout = vs.layout
    acc = np.zeros((T - 1, K, K))
    for _ in range(n_mc):
        x = _sample_marginals(sm.means[:-1], sm.covs[:-1], rng)
        R, r = layout.unpack(_sample_recurrence_rows(vs, rng))
        nu = np.einsum('ksm,tm->tks', R, x) + r[None]
        if params.transitions == VariantTag.STICKY:
            lt = log_expit(-nu) + E.log_pi[None]
            idx = np.arange(K)
            lt[:, idx, idx] = log_expit(nu[..., 0]) if K > 1 else 0.0
        else:
            lt = log_pi_sb(nu)
        acc += lt
    return acc / n_mc


def expected_dynamics_log_likes(E: ThetaExpectations, sm: SmootherResult) -> np.ndarray:
    """(T-1, K) E_q ln N(x_{t+1} | A_k x_t + b_k, Q_k)."""
    Exx, cross, _ = augmented_moments(sm)
    M = sm.means.shape[1]
    Enext = sm.second_moments[1:]
    out = np.zeros((Exx.shape[0] - 1, len(E.dyn)))
    for k, e in enumerate(E.dyn):
        out[:, k] = (-0.5 * np.einsum('ij,tji->t', e.sigma_inv, Enext)
                     + np.einsum('ij,tji->t', e.sigma_inv_w, cross)
                     - 0.5 * np.einsum('ij,tji->t', e.wt_sigma_inv_w, Exx[:-1])
                     + 0.5 * e.log_det_sigma_inv - 0.5 * M * LOG_2PI)
    return out


def expected_emission_log_likes(E: ThetaExpectations, sm: SmootherResult, data: Dataset) -> np.ndarray:
    """(T,) E_q ln N(y_t | C x_t + d, S) on observed steps, 0 on masked ones."""
    Exx, _, mu = augmented_moments(sm)
    obs = E.obs
    ll = (-0.5 * np.einsum('ti,ij,tj->t', data.y, obs.sigma_inv, data.y)
          + np.einsum('ti,ij,tj->t', data.y, obs.sigma_inv_w, mu)
          - 0.5 * np.einsum('ij,tji->t', obs.wt_sigma_inv_w, Exx)
          + 0.5 * obs.log_det_sigma_inv - 0.5 * data.N * LOG_2PI)
    return np.where(data.mask, ll, 0.0)


def update_qz(vs: VariationalState, local: LocalState, rng: np.random.Generator, n_mc: int,
              E: Optional[ThetaExpectations] = None) -> LocalState:
    E = E or theta_expectations(vs)
    K = vs.template.K
    T = local.smoother.means.shape[0]
    log_trans = expected_log_transitions(vs, E, local.smoother, rng, n_mc) \
        + expected_dynamics_log_likes(E, local.smoother)[:, None, :]
    spec = DiscreteChainSpec(log_init=uniform_log_init(K), log_trans=log_trans, log_likes=np.zeros((T, K)))
    return replace(local, qz=hmm_marginals(spec), qz_spec=spec)


def update_qomega(vs: VariationalState, local: LocalState, rng: np.random.Generator, n_samples: int,
                  E: Optional[ThetaExpectations] = None) -> LocalState:
    """E[omega_{t,k}] = pg_mean(I[z^_{t+1} >= k], sqrt(E[nu^2])) with z^ drawn from q(z)."""
    params = vs.template
    T = local.smoother.means.shape[0]
    if not params.is_recurrent or T < 2:
        return local
    if local.qz_spec is None:
        raise ValidationError('q(z) must be updated before q(omega)')
    E = E or theta_expectations(vs)
    Exx, _, _ = augmented_moments(local.smoother)
    acc = np.zeros((T - 1, params.n_sticks))
    for _ in range(n_samples):
        z_hat = ffbs_discrete(local.qz_spec, rng)
        e_nu2 = np.einsum('tsij,tji->ts', E.rec_ww[z_hat[:-1]], Exx[:-1])
        if np.any(e_nu2 < -1e-10):
            raise NumericalError('negative second moment of a stick logit')
        reached, _ = stick_indicators(stick_outcomes(params, z_hat[:-1], z_hat[1:]), params.n_sticks)
        acc += pg_mean(reached, np.sqrt(np.clip(e_nu2, 0.0, None)))
    return replace(local, e_omega=acc / n_samples)


# ============================================================================
# Sufficient statistics and the global step
# ============================================================================

@dataclass(frozen=True, eq=False)
class SviStats:
    dyn: list
    obs: Optional[MNIWStats]
    rec_J: Optional[np.ndarray]
    rec_h: Optional[np.ndarray]
    counts: Optional[np.ndarray]

    def __add__(self, other: 'SviStats') -> 'SviStats':
        def add(a, b):
            return None if a is None else a + b
        return SviStats(dyn=[a + b for a, b in zip(self.dyn, other.dyn)], obs=add(self.obs, other.obs),
                        rec_J=add(self.rec_J, other.rec_J), rec_h=add(self.rec_h, other.rec_h),
                        counts=add(self.counts, other.counts))

    def scale(self, s: float) -> 'SviStats':
        def mul(a):
            return None if a is None else s * a
        return SviStats(dyn=[d.scale(s) for d in self.dyn], obs=None if self.obs is None else self.obs.scale(s),
                        rec_J=mul(self.rec_J), rec_h=mul(self.rec_h), counts=mul(self.counts))


def expected_statistics(vs: VariationalState, local: LocalState, data: Dataset) -> SviStats:
    """Expected sufficient statistics of one sequence under its local factors."""
    params = vs.template
    K, M = params.K, params.M
    sm = local.smoother
    Exx, cross, mu = augmented_moments(sm)
    Enext = sm.second_moments[1:]
    gamma, pair = local.qz.unary, local.qz.pairwise
    dyn = []
    for k in range(K):
        w = gamma[1:, k]
        dyn.append(MNIWStats(xx=np.einsum('t,tij->ij', w, Exx[:-1]),
                             yx=np.einsum('t,tij->ji', w, cross),
                             yy=np.einsum('t,tij->ij', w, Enext), n=float(w.sum())))
    obs = None
    if params.variant != VariantTag.RARHMM:
        m = data.mask.astype(float)
        obs = MNIWStats(xx=np.einsum('t,tij->ij', m, Exx), yx=(data.y * m[:, None]).T @ mu,
                        yy=(data.y * m[:, None]).T @ data.y, n=float(m.sum()))
    rec_J = rec_h = None
    if params.is_recurrent:
        layout = vs.layout
        B = layout.projections()
        rec_J = np.zeros((layout.n_groups, layout.n_sticks, layout.D, layout.D))
        rec_h = np.zeros((layout.n_groups, layout.n_sticks, layout.D))
        coef = np.einsum('tij,ijs->tis', pair, _kappa_table(params))
        for i in range(K):
            g = layout.group_of(i)
            Ji = np.einsum('t,ts,tmn->smn', gamma[:-1, i], local.e_omega, Exx[:-1])
            rec_J[g] += np.einsum('dm,smn,en->sde', B[i], Ji, B[i])
            rec_h[g] += np.einsum('dm,ts,tm->sd', B[i], coef[:, i], mu[:-1])
    counts = None
    if params.transitions in (VariantTag.SLDS, VariantTag.STICKY):
        counts = pair.sum(axis=0)
        if params.transitions == VariantTag.STICKY:
            counts = np.where(_offdiag(K), counts, 0.0)
    return SviStats(dyn=dyn, obs=obs, rec_J=rec_J, rec_h=rec_h, counts=counts)


def update_qtheta(vs: VariationalState, stats: SviStats, step_size: float, hypers: Hyperparameters,
                  scale: float = 1.0) -> VariationalState:
    """Natural-gradient step eta <- (1 - rho) eta + rho (eta_prior + scale * stats).

    Raises:
        ValidationError: If ``step_size`` lies outside [0, 1]
    """
    if not 0.0 <= step_size <= 1.0:
        raise ValidationError(f'step size {step_size} outside [0, 1]')
    if step_size == 0.0:
        return vs
    rho = step_size
    prior = _prior_state(vs.template, hypers)

    def blend(current, target):
        return target if rho == 1.0 else current.scale(1.0 - rho) + target.scale(rho)

    q_dyn = [from_natural(blend(to_natural(q), prior['dyn'] + s.scale(scale))) for q, s in zip(vs.q_dyn, stats.dyn)]
    q_obs = None
    if vs.q_obs is not None:
        q_obs = from_natural(blend(to_natural(vs.q_obs), prior['obs'] + stats.obs.scale(scale)))
    rec_J = rec_h = None
    if vs.rec_J is not None:
        rec_J = (1.0 - rho) * vs.rec_J + rho * (prior['rec_J'] + scale * stats.rec_J)
        rec_h = (1.0 - rho) * vs.rec_h + rho * (prior['rec_h'] + scale * stats.rec_h)
    alpha = None
    if vs.markov_alpha is not None:
        alpha = (1.0 - rho) * vs.markov_alpha + rho * (prior['alpha'] + scale * stats.counts)
    return VariationalState(template=vs.template, q_dyn=q_dyn, q_obs=q_obs, rec_J=rec_J, rec_h=rec_h,
                            markov_alpha=alpha)


# ============================================================================
# ELBO
# ============================================================================

@dataclass(frozen=True)
class ElboTerms:
    """Parts of the evidence lower bound.

    ``cross`` is the sampled E_q ln p(y, x, z | theta), ``kl`` the Monte Carlo
    KL(q(theta) || p(theta)).
    """
    cross: float
    entropy_x: float
    entropy_z: float
    kl: float

    @property
    def total(self) -> float:
        return self.cross + self.entropy_x + self.entropy_z - self.kl


def _gaussian_rows_log_density(W: np.ndarray, means: np.ndarray, covs: np.ndarray) -> float:
    G, S, D = W.shape
    return float(sum(gaussian_logpdf(W[g, s], means[g, s], covs[g, s]) for g in range(G) for s in range(S)))


def sample_theta(vs: VariationalState, rng: np.random.Generator) -> tuple[ModelParams, float]:
    """Draw theta ~ q(theta); returns the draw and ln q(theta)."""
    p = vs.template
    M = p.M
    A, b, Q = np.zeros_like(p.A), np.zeros_like(p.b), np.zeros_like(p.Q)
    log_q = 0.0
    for k, q in enumerate(vs.q_dyn):
        W, Sigma = sample_mniw(q, rng)
        A[k], b[k], Q[k] = W[:, :M], W[:, M], Sigma
        log_q += mniw_log_density(W, Sigma, q)
    updates = dict(A=A, b=b, Q=Q)
    if vs.q_obs is not None:
        W, S = sample_mniw(vs.q_obs, rng)
        updates.update(C=W[:, :M], d=W[:, M], S=S)
        log_q += mniw_log_density(W, S, vs.q_obs)
    if vs.rec_J is not None:
        means, covs = vs.recurrence_moments()
        W = _sample_recurrence_rows(vs, rng)
        updates['R'], updates['r'] = vs.layout.unpack(W)
        log_q += _gaussian_rows_log_density(W, means, covs)
    if vs.markov_alpha is not None:
        pi, lq = _sample_markov(vs.markov_alpha, p.transitions, rng)
        updates['pi'] = pi
        log_q += lq
    return p.with_updates(**updates), float(log_q)


def _sample_markov(alpha: np.ndarray, transitions: VariantTag, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    K = alpha.shape[0]
    if transitions == VariantTag.SLDS:
        pi = np.stack([sample_dirichlet(DirichletParams(a), rng) for a in alpha])
        return pi, float(sum(dirichlet_log_density(pi[k], DirichletParams(alpha[k])) for k in range(K)))
    if K == 1:
        return np.ones((1, 1)), 0.0
    pi = np.zeros((K, K))
    lq = 0.0
    for k in range(K):
        others = np.delete(np.arange(K), k)
        pi[k, others] = sample_dirichlet(DirichletParams(alpha[k, others]), rng)
        lq += dirichlet_log_density(pi[k, others], DirichletParams(alpha[k, others]))
    return pi, lq


def log_prior_theta(params: ModelParams, hypers: Hyperparameters) -> float:
    M = params.M
    total = 0.0
    for k in range(params.K):
        total += mniw_log_density(np.hstack([params.A[k], params.b[k][:, None]]), params.Q[k], hypers.dynamics)
    if params.variant != VariantTag.RARHMM:
        total += mniw_log_density(np.hstack([params.C, params.d[:, None]]), params.S, hypers.emissions)
    if params.is_recurrent:
        layout = RecurrenceLayout.for_params(params)
        mean0, cov0 = layout.prior(hypers.recurrence)
        W = layout.pack(params.R, params.r)
        covs = np.broadcast_to(cov0, W.shape + (layout.D,))
        total += _gaussian_rows_log_density(W, mean0, covs)
    if params.pi is not None:
        K = params.K
        alpha0 = _prior_state(params, hypers)['alpha']
        if params.transitions == VariantTag.SLDS:
            total += sum(dirichlet_log_density(params.pi[k], DirichletParams(alpha0[k])) for k in range(K))
        elif K > 1:
            for k in range(K):
                others = np.delete(np.arange(K), k)
                total += dirichlet_log_density(params.pi[k, others], DirichletParams(alpha0[k, others]))
    return float(total)


def kl_theta(vs: VariationalState, hypers: Hyperparameters) -> float:
    """KL(q(theta) || p(theta)) in closed form."""
    p = vs.template
    kl = sum(mniw_kl(q, hypers.dynamics) for q in vs.q_dyn)
    if vs.q_obs is not None:
        kl += mniw_kl(vs.q_obs, hypers.emissions)
    if vs.rec_J is not None:
        layout = vs.layout
        means, covs = vs.recurrence_moments()
        mean0, cov0 = layout.prior(hypers.recurrence)
        P0 = chol_inv(cov0, 'recurrence prior covariance')
        logdet0 = np.linalg.slogdet(cov0)[1]
        for g, s in np.ndindex(*means.shape[:2]):
            diff = means[g, s] - mean0[g, s]
            kl += 0.5 * (np.trace(P0 @ covs[g, s]) + diff @ P0 @ diff - layout.D
                         + logdet0 - np.linalg.slogdet(covs[g, s])[1])
    if vs.markov_alpha is not None:
        K = p.K
        alpha0 = _prior_state(p, hypers)['alpha']
        for k in range(K):
            keep = np.arange(K) if p.transitions == VariantTag.SLDS else np.delete(np.arange(K), k)
            if keep.size:
                kl += dirichlet_kl(DirichletParams(vs.markov_alpha[k, keep]), DirichletParams(alpha0[k, keep]))
    return float(kl)


def elbo_estimate(vs: VariationalState, local: LocalState, data: Dataset, hypers: Hyperparameters,
                  rng: np.random.Generator, n_samples: int = 1, include_global: bool = True) -> ElboTerms:
    """Monte Carlo ELBO of one sequence.

    With ``include_global=False`` theta is fixed at the mean of q(theta) and
    the KL term is dropped, giving a bound on ln p(y | theta).
    """
    if local.qz_spec is None:
        raise ValidationError('q(z) must be updated before the ELBO can be estimated')
    params = vs.template
    rarhmm = params.variant == VariantTag.RARHMM
    cross, kl = 0.0, 0.0
    for _ in range(n_samples):
        if include_global:
            theta, log_q = sample_theta(vs, rng)
            kl += log_q - log_prior_theta(theta, hypers)
        else:
            theta = vs.mean_params()
        z = ffbs_discrete(local.qz_spec, rng)
        x = data.y.copy() if rarhmm else ffbs_continuous(local.qx_spec, rng)
        cross += score_joint(theta, LatentPath(z=z, x=x), data)
    entropy_x = 0.0 if rarhmm else local.smoother.entropy()
    entropy_z = local.qz.entropy(local.qz_spec)
    return ElboTerms(cross=cross / n_samples, entropy_x=entropy_x, entropy_z=entropy_z, kl=kl / n_samples)


def markov_elbo(vs: VariationalState, local: LocalState, data: Dataset, hypers: Hyperparameters) -> ElboTerms:
    """Closed-form ELBO of one sequence for a Gaussian SLDS with Markov transitions.

    Every term has an analytic expectation here, so the value is
    deterministic and never decreases under coordinate ascent.

    Raises:
        ValidationError: For stick-breaking transitions or before q(z) exists
    """
    params = vs.template
    if params.transitions != VariantTag.SLDS:
        raise ValidationError('the closed-form ELBO needs Markov transitions; use elbo_estimate')
    if local.qz_spec is None:
        raise ValidationError('q(z) must be updated before the ELBO can be evaluated')
    E = theta_expectations(vs)
    sm = local.smoother
    gamma, pair = local.qz.unary, local.qz.pairwise
    cross = (-np.log(params.K) - 0.5 * params.M * LOG_2PI - 0.5 * float(np.trace(sm.second_moments[0]))
             + float(np.einsum('tij,ij->', pair, E.log_pi))
             + float(np.sum(gamma[1:] * expected_dynamics_log_likes(E, sm)))
             + float(np.sum(expected_emission_log_likes(E, sm, data))))
    return ElboTerms(cross=cross, entropy_x=sm.entropy(), entropy_z=local.qz.entropy(local.qz_spec),
                     kl=kl_theta(vs, hypers))


# ============================================================================
# Drivers
# ============================================================================

def update_local(vs: VariationalState, local: LocalState, data: Dataset, config: SviConfig,
                 rng: np.random.Generator) -> LocalState:
    E = theta_expectations(vs)
    for _ in range(config.n_local_iters):
        local = update_qx(vs, local, data, E)
        local = update_qz(vs, local, rng, config.n_mc_logpi, E)
        local = update_qomega(vs, local, rng, config.n_mc_zhat, E)
    return local


@dataclass(eq=False)
class SviResult:
    state: VariationalState
    locals: list
    elbos: list


def fit_svi(vs: VariationalState, datasets: Sequence[Dataset], locals_: Sequence[LocalState], config: SviConfig,
            hypers: Hyperparameters, rng: np.random.Generator, out_dir: Optional[str] = None) -> SviResult:
    """Minibatch SVI over independent sequences.

    At iteration i a minibatch B is drawn (all sequences, in order, when the
    batch covers the dataset), its local factors are refreshed, and q(theta)
    takes a step of size ``config.step_size(i)`` with statistics scaled by
    len(datasets) / |B|.
    """
    check_supported(vs.template)
    n_seq = len(datasets)
    if len(locals_) != n_seq:
        raise ValidationError(f'{len(locals_)} local states for {n_seq} sequences')
    locals_ = list(locals_)
    batch_size = min(config.minibatch_size, n_seq)
    rows = []
    elbos = []
    logger.info(f'Running {config.n_iters} SVI iterations over {n_seq} sequence(s)')
    for i in range(config.n_iters):
        rho = config.step_size(i)
        batch = list(range(n_seq)) if batch_size == n_seq else sorted(rng.choice(n_seq, batch_size, replace=False).tolist())
        stats = None
        for j in batch:
            locals_[j] = update_local(vs, locals_[j], datasets[j], config, rng)
            s = expected_statistics(vs, locals_[j], datasets[j])
            stats = s if stats is None else stats + s
        scale = n_seq / len(batch)
        vs = update_qtheta(vs, stats, rho, hypers, scale=scale)
        local_terms = [elbo_estimate(vs, locals_[j], datasets[j], hypers, rng, config.n_elbo_samples,
                                     include_global=False) for j in batch]
        elbo = scale * sum(t.total for t in local_terms) - kl_theta(vs, hypers)
        elbos.append(float(elbo))
        rows.append([i, repr(float(elbo)), repr(float(rho)), ';'.join(str(j) for j in batch)])
        logger.debug(f'svi iteration {i}: elbo {elbo:.3f}, step {rho:.3f}')
    if out_dir:
        write_csv(os.path.join(out_dir, FILES['elbo']), ['iteration', 'elbo', 'step_size', 'minibatch_ids'], rows)
    logger.info(f'✅ SVI finished, final ELBO {elbos[-1]:.3f}' if elbos else '✅ SVI finished')
    return SviResult(state=vs, locals=locals_, elbos=elbos)


def coordinate_ascent(vs: VariationalState, datasets: Sequence[Dataset], locals_: Sequence[LocalState],
                      config: SviConfig, hypers: Hyperparameters, rng: np.random.Generator,
                      out_dir: Optional[str] = None) -> SviResult:
    """Batch mean-field coordinate ascent: full batch and unit steps."""
    batch_config = config.model_copy(update={'minibatch_size': len(datasets), 'base_rate': 1.0, 'decay': 0.0})
    return fit_svi(vs, datasets, locals_, batch_config, hypers, rng, out_dir)
