"""Blocked Gibbs sampler for the augmented model.

The chain alternates through a fixed sweep:

    latent log counts -> latent factors -> local loadings -> local scales
    -> global scales -> loading allocation (MH) -> covariate coefficients
    (MH) -> noise variance -> mean coefficients -> baseline stack -> size
    factor stack

Conditioned on the latent factors every coordinate of the latent
log-count matrix is an independent truncated normal, which is what makes
each block conjugate (or a cheap one-dimensional MH step).  The simplex
allocation phi_k and the coefficient rows f_k mix poorly under Gibbs, so
both use adaptive random-walk Metropolis with a Haario-style adapted
proposal covariance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky as sp_cholesky, solve_triangular
from scipy.special import gammaln

from .calibrate import HyperConfig
from .data import CountTable, CovariateDesign
from .priors import (
    OMEGA_EPS,
    ConstrainedDpStack,
    DirHsHyper,
    DirHsState,
    constrained_atom_pair,
    sample_alpha_prior,
    sample_dirhs_prior,
    sample_r_prior,
    sample_stack_prior,
    stick_break,
)
from .rand import sample_gig, trunc_norm_interval

# Variance floor for the local loading prior; keeps precisions finite when
# shrinkage scales underflow.
_VAR_FLOOR = 1e-30
# Hard box for additive-log-ratio coordinates of phi; exp() underflows
# past ~745 and the corner-seeking Dirichlet walk must not escape there.
_ALR_BOX = 700.0


class NumericsError(RuntimeError):
    """Non-finite value produced by a sampler block."""


@dataclass
class SamplerConfig:
    """Chain length, thinning, seed, and MH adaptation settings."""

    n_iter: int
    n_burn: int
    thin: int = 10
    seed: int = 0
    adapt_start: int = 100
    initial_scale: float | None = None
    target_accept: float = 0.234
    omega_mh_scale: float = 0.6

    def __post_init__(self):
        if self.n_burn >= self.n_iter:
            raise ValueError("n_burn must be smaller than n_iter")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter, "n_burn": self.n_burn, "thin": self.thin,
            "seed": self.seed, "adapt_start": self.adapt_start,
            "initial_scale": self.initial_scale,
            "target_accept": self.target_accept,
            "omega_mh_scale": self.omega_mh_scale,
        }


@dataclass
class ModelData:
    """Fixed inputs of one fit: latent-scale count bounds and designs."""

    lo: np.ndarray                 # (N, J) log y, -inf where y = 0
    hi: np.ndarray                 # (N, J) log(y+1); +inf marks censoring
    x_cov: np.ndarray              # (N, Pc) covariance design incl. intercept
    x_mean: np.ndarray             # (N, Pm) mean design, no intercept
    subject_codes: np.ndarray | None = None
    n_subjects: int | None = None

    @classmethod
    def from_table(cls, counts: CountTable, design: CovariateDesign) -> "ModelData":
        if design.n_samples != counts.n_samples:
            raise ValueError("design and counts disagree on sample count")
        y = counts.counts.astype(float)
        with np.errstate(divide="ignore"):
            lo = np.where(y > 0, np.log(y), -np.inf)
        hi = np.log1p(y)
        codes, labels = counts.subject_index()
        return cls(lo=lo, hi=hi,
                   x_cov=design.x_cov(), x_mean=design.x_mean(),
                   subject_codes=codes,
                   n_subjects=None if labels is None else len(labels))

    @property
    def n_samples(self) -> int:
        return self.lo.shape[0]

    @property
    def n_features(self) -> int:
        return self.lo.shape[1]

    @property
    def subject_mode(self) -> bool:
        return self.subject_codes is not None


@dataclass
class ChainState:
    """Everything the sweep touches.  Invariants: lo <= ytilde < hi for
    every entry, and alpha always equals the atom selected by its
    component/inner indicators."""

    factor: DirHsState
    F: np.ndarray
    sigma2: float
    eta: np.ndarray
    beta: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    alpha_stack: ConstrainedDpStack
    z_alpha: np.ndarray
    d_alpha: np.ndarray
    r_stack: ConstrainedDpStack
    z_r: np.ndarray
    d_r: np.ndarray
    ytilde: np.ndarray
    iteration: int = 0


# ---------------------------------------------------------------------------
# mean-matrix bookkeeping
# ---------------------------------------------------------------------------

def alpha_rows(state: ChainState, data: ModelData) -> np.ndarray:
    if data.subject_mode:
        return state.alpha[data.subject_codes]
    return np.broadcast_to(state.alpha, (data.n_samples, data.n_features))

def factor_scores(state: ChainState, data: ModelData) -> np.ndarray:
    """T[i, k] = f_k . x_i."""
    return data.x_cov @ state.F.T

def factor_contrib(state: ChainState, data: ModelData) -> np.ndarray:
    """(N, J) matrix Lambda(x_i) eta_i."""
    return (factor_scores(state, data) * state.eta) @ state.factor.Q.T

def mean_offset(state: ChainState, data: ModelData) -> np.ndarray:
    """Mean matrix without the factor term."""
    m = state.r[:, None] + alpha_rows(state, data)
    if data.x_mean.shape[1]:
        m = m + data.x_mean @ state.beta.T
    return m

def mean_matrix(state: ChainState, data: ModelData) -> np.ndarray:
    return mean_offset(state, data) + factor_contrib(state, data)


def _guard(block: str, state: ChainState, *arrays):
    for a in arrays:
        ok = np.isfinite(a) if np.isscalar(a) else np.all(np.isfinite(a))
        if not ok:
            raise NumericsError(
                f"non-finite value in block {block!r} at iteration {state.iteration}")


# ---------------------------------------------------------------------------
# adaptive random-walk machinery
# ---------------------------------------------------------------------------

class AdaptiveRW:
    """Random-walk proposal with running-covariance adaptation.

    The proposal is exp(log_scale) * chol(Sigma_hat + eps I) z with the
    scale nudged toward a target acceptance rate (Robbins-Monro) and the
    covariance estimated from the chain history.  freeze() pins the
    kernel, which run_chain calls at the end of burn-in.
    """

    def __init__(self, dim: int, initial_scale: float | None = None,
                 target_accept: float = 0.234, adapt_start: int = 100,
                 jitter: float = 1e-6, refresh: int = 25):
        self.dim = dim
        self.log_scale = np.log(initial_scale if initial_scale is not None
                                else 2.38 / np.sqrt(dim))
        self.target_accept = target_accept
        self.adapt_start = adapt_start
        self.jitter = jitter
        self.refresh = refresh
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.n_obs = 0
        self.chol = np.eye(dim)
        self.frozen = False
        self.n_prop = 0
        self.n_acc = 0
        self.n_prop_frozen = 0
        self.n_acc_frozen = 0

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        step = self.chol @ rng.standard_normal(self.dim)
        return x + np.exp(self.log_scale) * step

    def observe(self, x: np.ndarray, accepted: bool):
        if self.frozen:
            self.n_prop_frozen += 1
            self.n_acc_frozen += int(accepted)
            return
        self.n_prop += 1
        self.n_acc += int(accepted)
        gamma = 1.0 / (10.0 + self.n_prop) ** 0.6
        self.log_scale += gamma * (float(accepted) - self.target_accept)
        delta = x - self.mean
        self.n_obs += 1
        self.mean += delta / self.n_obs
        self.m2 += np.outer(delta, x - self.mean)
        if self.n_obs >= max(self.adapt_start, 2 * self.dim) and self.n_obs % self.refresh == 0:
            cov = self.m2 / (self.n_obs - 1)
            scale = max(np.trace(cov) / self.dim, 1e-12)
            try:
                self.chol = np.linalg.cholesky(cov + self.jitter * scale * np.eye(self.dim))
            except np.linalg.LinAlgError:
                pass

    def freeze(self):
        self.frozen = True

    @property
    def frozen_accept_rate(self) -> float:
        if self.n_prop_frozen == 0:
            return float("nan")
        return self.n_acc_frozen / self.n_prop_frozen


def _mh_step(rng, value, logtarget, proposal: AdaptiveRW):
    """One Metropolis step; returns (new_value, accepted)."""
    cur = logtarget(value)
    cand = proposal.propose(value, rng)
    new = logtarget(cand)
    accepted = bool(np.log(rng.random()) < new - cur)
    out = cand if accepted else value
    proposal.observe(out, accepted)
    return out, accepted


# ---------------------------------------------------------------------------
# Gibbs blocks
# ---------------------------------------------------------------------------

def update_latent_y(state: ChainState, data: ModelData, rng) -> ChainState:
    """Redraw every latent log count from its truncated normal bin."""
    m = mean_matrix(state, data)
    state.ytilde = trunc_norm_interval(rng, m, np.sqrt(state.sigma2), data.lo, data.hi)
    _guard("latent_y", state, state.ytilde)
    return state


def update_eta(state: ChainState, data: ModelData, rng) -> ChainState:
    """Conjugate factor-score update: eta_i ~ N(V_i rhs_i, V_i) with
    V_i^-1 = I + Lambda_i' Lambda_i / sigma2."""
    Q = state.factor.Q
    K = Q.shape[1]
    T = factor_scores(state, data)
    resid = state.ytilde - mean_offset(state, data)
    QtQ = Q.T @ Q
    prec = np.eye(K)[None, :, :] + (QtQ[None, :, :]
                                    * T[:, :, None] * T[:, None, :]) / state.sigma2
    rhs = T * (resid @ Q) / state.sigma2
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[:, :, None])
    z = rng.standard_normal((data.n_samples, K, 1))
    extra = np.linalg.solve(np.swapaxes(chol, 1, 2), z)
    state.eta = (mean + extra)[:, :, 0]
    _guard("eta", state, state.eta)
    return state


def update_q(state: ChainState, data: ModelData, rng) -> ChainState:
    """Per-feature conjugate draw of the local loading row against the
    regressors g_ik = (f_k . x_i) eta_ik."""
    fac = state.factor
    K = fac.Q.shape[1]
    G = factor_scores(state, data) * state.eta
    GtG = G.T @ G
    resid = state.ytilde - mean_offset(state, data)
    prior_var = np.maximum(fac.zeta ** 2 * fac.phi.T * fac.tau[None, :], _VAR_FLOOR)
    prec = GtG[None, :, :] / state.sigma2 + np.eye(K)[None, :, :] / prior_var[:, :, None]
    rhs = (resid.T @ G) / state.sigma2
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[:, :, None])
    z = rng.standard_normal((data.n_features, K, 1))
    extra = np.linalg.solve(np.swapaxes(chol, 1, 2), z)
    fac.Q = (mean + extra)[:, :, 0]
    _guard("q", state, fac.Q)
    return state


def update_zeta(state: ChainState, rng) -> ChainState:
    """Inverse-gamma expansion Gibbs step for the half-Cauchy scales."""
    fac = state.factor
    phi_t = np.maximum(fac.phi.T, _VAR_FLOOR)
    tau = np.maximum(fac.tau, _VAR_FLOOR)
    rate_z = 1.0 / fac.nu_aux + fac.Q ** 2 / (2.0 * phi_t * tau[None, :])
    rate_z = np.minimum(rate_z, 1e300)
    zeta2 = 1.0 / rng.gamma(1.0, 1.0 / rate_z)
    fac.nu_aux = 1.0 / rng.gamma(1.0, 1.0 / (1.0 + 1.0 / zeta2))
    fac.zeta = np.sqrt(zeta2)
    _guard("zeta", state, fac.zeta, fac.nu_aux)
    return state


def update_tau(state: ChainState, hypers: HyperConfig, rng) -> ChainState:
    """Global scale per factor: GIG(a_tau - J/2, 2 b_tau / J, S_k) with
    S_k = sum_j q_jk^2 / (zeta_jk^2 phi_jk).  A numerically dead column
    (S_k ~ 0) falls back to a prior draw."""
    fac = state.factor
    J = fac.Q.shape[0]
    S = (fac.Q ** 2 / np.maximum(fac.zeta ** 2 * fac.phi.T, _VAR_FLOOR)).sum(axis=0)
    p = hypers.a_tau - J / 2.0
    a = 2.0 * hypers.b_tau / J
    tau = np.empty_like(fac.tau)
    for k in range(tau.size):
        if S[k] < 1e-300:
            tau[k] = rng.gamma(hypers.a_tau, J / hypers.b_tau)
        else:
            tau[k] = sample_gig(rng, p, a, S[k])
    fac.tau = np.maximum(tau, 1e-300)
    _guard("tau", state, fac.tau)
    return state


def _alr(phi_k: np.ndarray) -> np.ndarray:
    return np.log(phi_k[:-1]) - np.log(phi_k[-1])


def _alr_inv(z: np.ndarray) -> np.ndarray:
    x = np.append(z, 0.0)
    x -= x.max()
    p = np.exp(x)
    return p / p.sum()


def update_phi(state: ChainState, hypers: HyperConfig, rng,
               proposals: list[AdaptiveRW]) -> ChainState:
    """Adaptive MH on the additive-log-ratio scale for each phi_k.

    The transformed target is prod_j phi_j^(a_phi - 1/2) exp(-c_j/phi_j)
    with c_j = q_jk^2 / (2 zeta_jk^2 tau_k); the extra +1 in the exponent
    relative to the Dirichlet density is the simplex Jacobian.
    """
    fac = state.factor
    a_phi = hypers.a_phi
    for k in range(fac.phi.shape[0]):
        c = fac.Q[:, k] ** 2 / np.maximum(2.0 * fac.zeta[:, k] ** 2 * fac.tau[k],
                                          _VAR_FLOOR)

        def logtarget(z):
            if np.any(np.abs(z) > _ALR_BOX):
                return -np.inf
            phi = _alr_inv(z)
            logphi = np.log(np.maximum(phi, 1e-300))
            with np.errstate(over="ignore"):
                penalty = c / np.maximum(phi, 1e-300)
            return (a_phi - 0.5) * logphi.sum() - penalty.sum()

        z0 = _alr(np.maximum(fac.phi[k], 1e-300))
        z1, _ = _mh_step(rng, z0, logtarget, proposals[k])
        fac.phi[k] = _alr_inv(z1)
    _guard("phi", state, fac.phi)
    return state


def update_f(state: ChainState, data: ModelData, rng,
             proposals: list[AdaptiveRW]) -> ChainState:
    """Adaptive random-walk MH on each coefficient row f_k against the
    standard normal prior; the likelihood enters through t_i = f_k . x_i
    with per-sample quadratic coefficients."""
    Q = state.factor.Q
    for k in range(state.F.shape[0]):
        T = factor_scores(state, data)
        G = T * state.eta
        contrib = G @ Q.T
        contrib_k = np.outer(G[:, k], Q[:, k])
        resid_k = state.ytilde - mean_offset(state, data) - contrib + contrib_k
        b = state.eta[:, k] * (resid_k @ Q[:, k])
        c = (Q[:, k] @ Q[:, k]) * state.eta[:, k] ** 2

        def logtarget(f):
            t = data.x_cov @ f
            return -0.5 * (c @ (t * t) - 2.0 * (b @ t)) / state.sigma2 - 0.5 * (f @ f)

        f1, _ = _mh_step(rng, state.F[k].copy(), logtarget, proposals[k])
        state.F[k] = f1
    _guard("f", state, state.F)
    return state


def update_sigma2(state: ChainState, data: ModelData, hypers: HyperConfig, rng) -> ChainState:
    resid = state.ytilde - mean_matrix(state, data)
    shape = hypers.a_sigma + resid.size / 2.0
    rate = hypers.b_sigma + 0.5 * float((resid * resid).sum())
    state.sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    _guard("sigma2", state, state.sigma2)
    return state


def update_beta(state: ChainState, data: ModelData, hypers: HyperConfig, rng) -> ChainState:
    """Conjugate ridge-style regression update of every beta row; the
    prior is shared so one Cholesky serves all features."""
    Xm = data.x_mean
    pm = Xm.shape[1]
    if pm == 0:
        return state
    resid = state.ytilde - state.r[:, None] - alpha_rows(state, data) \
        - factor_contrib(state, data)
    prec = Xm.T @ Xm / state.sigma2 + np.eye(pm) / hypers.u2_beta
    L = sp_cholesky(prec, lower=True)
    rhs = Xm.T @ resid / state.sigma2
    mean = cho_solve((L, True), rhs)
    z = rng.standard_normal((pm, data.n_features))
    state.beta = (mean + solve_triangular(L.T, z, lower=False)).T
    _guard("beta", state, state.beta)
    return state


def _stick_update(rng, z_flat: np.ndarray, L: int, concentration: float) -> np.ndarray:
    counts = np.bincount(z_flat, minlength=L).astype(float)
    tail = counts[::-1].cumsum()[::-1]
    n_gt = np.concatenate([tail[1:], [0.0]])
    V = np.empty(L)
    V[:-1] = rng.beta(1.0 + counts[:-1], concentration + n_gt[:-1])
    V[-1] = 1.0
    V[:-1] = np.clip(V[:-1], 1e-12, 1.0 - 1e-12)
    return V


def _categorical(rng, logits: np.ndarray):
    """Gumbel-max categorical draw along the last axis."""
    g = rng.gumbel(size=logits.shape)
    return np.argmax(logits + g, axis=-1)


def update_alpha_stack(state: ChainState, data: ModelData, hypers: HyperConfig, rng,
                       omega_scale: float = 0.6) -> ChainState:
    """Blocked-Gibbs pass over the baseline stack: component and inner
    indicators, sticks, atom locations (conjugate; the balancing atom is
    linear in xi with slope -omega/(1-omega)), and inner weights by
    logit-scale MH (the balancing atom moves with omega)."""
    stack = state.alpha_stack
    L = stack.L
    sigma2 = state.sigma2
    nu = stack.nu
    resid = state.ytilde - state.r[:, None] - factor_contrib(state, data)
    if data.x_mean.shape[1]:
        resid = resid - data.x_mean @ state.beta.T

    log_psi = np.log(np.maximum(stack.psi, 1e-300))
    log_w = np.log(np.stack([stack.omega, 1.0 - stack.omega], axis=-1))  # (L, 2)

    if data.subject_mode:
        S = data.n_subjects
        codes = data.subject_codes
        ssum = np.zeros((S, data.n_features))
        np.add.at(ssum, codes, resid)
        n_per = np.bincount(codes, minlength=S).astype(float)      # (S,)
        a1, a2 = stack.atoms()                                      # (J, L)
        atoms = np.stack([a1, a2], axis=-1)                         # (J, L, 2)
        # log-likelihood of assigning unit (s, j) to (l, d)
        quad = atoms[None, :, :, :] ** 2 * n_per[:, None, None, None]
        cross = 2.0 * atoms[None, :, :, :] * ssum[:, :, None, None]
        loglik = -(quad - cross) / (2.0 * sigma2)
        logits = log_psi[None, None, :, None] + log_w[None, None, :, :] + loglik
        flat = _categorical(rng, logits.reshape(S, data.n_features, 2 * L))
        # layout of reshape: index = l * 2 + d
        state.z_alpha = flat // 2
        state.d_alpha = flat % 2
    else:
        s_j = resid.sum(axis=0)                                     # (J,)
        n_obs = float(data.n_samples)
        a1, a2 = stack.atoms()                                      # (L,)
        atoms = np.stack([a1, a2], axis=-1)                         # (L, 2)
        quad = atoms[None, :, :] ** 2 * n_obs
        cross = 2.0 * atoms[None, :, :] * s_j[:, None, None]
        loglik = -(quad - cross) / (2.0 * sigma2)
        logits = log_psi[None, :, None] + log_w[None, :, :] + loglik
        flat = _categorical(rng, logits.reshape(data.n_features, 2 * L))
        state.z_alpha = flat // 2
        state.d_alpha = flat % 2

    stack.V = _stick_update(rng, state.z_alpha.ravel(), L, hypers.c_alpha)
    stack.psi = stick_break(stack.V)

    slope2 = -stack.omega / (1.0 - stack.omega)                     # (L,)
    icpt2 = nu / (1.0 - stack.omega)

    if data.subject_mode:
        n_mat = n_per[:, None]                                      # (S, 1)
        for l in range(L):
            in_l = state.z_alpha == l
            d0 = in_l & (state.d_alpha == 0)
            d1 = in_l & (state.d_alpha == 1)
            cnt0 = (d0 * n_mat).sum(axis=0)                         # (J,)
            cnt1 = (d1 * n_mat).sum(axis=0)
            sum0 = (ssum * d0).sum(axis=0)
            sum1 = ((ssum - n_mat * icpt2[l]) * d1).sum(axis=0)
            prec = 1.0 / hypers.u2_alpha + (cnt0 + slope2[l] ** 2 * cnt1) / sigma2
            num = nu / hypers.u2_alpha + (sum0 + slope2[l] * sum1) / sigma2
            stack.xi[:, l] = rng.normal(num / prec, 1.0 / np.sqrt(prec))
    else:
        for l in range(L):
            in_l = state.z_alpha == l
            d0 = in_l & (state.d_alpha == 0)
            d1 = in_l & (state.d_alpha == 1)
            cnt0 = n_obs * d0.sum()
            cnt1 = n_obs * d1.sum()
            sum0 = s_j[d0].sum()
            sum1 = (s_j[d1] - n_obs * icpt2[l]).sum()
            prec = 1.0 / hypers.u2_alpha + (cnt0 + slope2[l] ** 2 * cnt1) / sigma2
            num = nu / hypers.u2_alpha + (sum0 + slope2[l] * sum1) / sigma2
            stack.xi[l] = rng.normal(num / prec, 1.0 / np.sqrt(prec))

    # inner weights: Be(a + n1, b + n2) times the likelihood of the
    # balancing-atom units, random walk on the logit scale
    for l in range(L):
        in_l = state.z_alpha == l
        d1 = in_l & (state.d_alpha == 1)
        n1 = float((in_l & (state.d_alpha == 0)).sum())
        n2 = float(d1.sum())
        if data.subject_mode:
            cnt1_j = (d1 * n_per[:, None]).sum(axis=0)              # (J,)
            sres1_j = (ssum * d1).sum(axis=0)
            xi_l = stack.xi[:, l]

            def loglik2(om):
                a2l = (nu - om * xi_l) / (1.0 - om)
                return float(-((cnt1_j * a2l ** 2).sum()
                               - 2.0 * (a2l * sres1_j).sum()) / (2.0 * sigma2))
        else:
            n_units2 = d1.sum()
            sres1 = s_j[d1].sum()
            xi_l = stack.xi[l]

            def loglik2(om):
                a2l = (nu - om * xi_l) / (1.0 - om)
                return float(-(n_obs * n_units2 * a2l ** 2
                               - 2.0 * a2l * sres1) / (2.0 * sigma2))

        def logtarget(u):
            om = 1.0 / (1.0 + np.exp(-u))
            if not (OMEGA_EPS <= om <= 1.0 - OMEGA_EPS):
                return -np.inf
            return ((hypers.a_omega_alpha + n1) * np.log(om)
                    + (hypers.b_omega_alpha + n2) * np.log1p(-om)
                    + loglik2(om))

        u0 = float(np.log(stack.omega[l]) - np.log1p(-stack.omega[l]))
        cur = logtarget(u0)
        cand = u0 + omega_scale * rng.standard_normal()
        new = logtarget(cand)
        if np.log(rng.random()) < new - cur:
            stack.omega[l] = np.clip(1.0 / (1.0 + np.exp(-cand)),
                                     OMEGA_EPS, 1.0 - OMEGA_EPS)

    a1, a2 = stack.atoms()
    if data.subject_mode:
        j_idx = np.broadcast_to(np.arange(data.n_features),
                                state.z_alpha.shape)
        state.alpha = np.where(state.d_alpha == 0,
                               a1[j_idx, state.z_alpha], a2[j_idx, state.z_alpha])
    else:
        state.alpha = np.where(state.d_alpha == 0,
                               a1[state.z_alpha], a2[state.z_alpha])
    _guard("alpha_stack", state, state.alpha, stack.V, stack.omega, stack.xi)
    return state


def update_r_stack(state: ChainState, data: ModelData, hypers: HyperConfig, rng,
                   omega_scale: float = 0.6) -> ChainState:
    """Blocked-Gibbs pass over the size-factor stack.  Unlike the
    baseline stack the atoms are normal kernels, so indicators condition
    on the current r values and each r_i gets its own conjugate draw."""
    stack = state.r_stack
    L = stack.L
    nu = stack.nu
    u_r2 = stack.kernel_sd ** 2
    sigma2 = state.sigma2
    J = data.n_features
    resid = state.ytilde - alpha_rows(state, data) - factor_contrib(state, data)
    if data.x_mean.shape[1]:
        resid = resid - data.x_mean @ state.beta.T
    sw = resid.sum(axis=1)                                          # (N,)

    a1, a2 = stack.atoms()
    atoms = np.stack([a1, a2], axis=-1)                             # (L, 2)
    log_psi = np.log(np.maximum(stack.psi, 1e-300))
    log_w = np.log(np.stack([stack.omega, 1.0 - stack.omega], axis=-1))
    dev = state.r[:, None, None] - atoms[None, :, :]
    logits = log_psi[None, :, None] + log_w[None, :, :] - dev ** 2 / (2.0 * u_r2)
    flat = _categorical(rng, logits.reshape(data.n_samples, 2 * L))
    state.z_r = flat // 2
    state.d_r = flat % 2

    stack.V = _stick_update(rng, state.z_r, L, hypers.c_r)
    stack.psi = stick_break(stack.V)

    slope2 = -stack.omega / (1.0 - stack.omega)
    icpt2 = nu / (1.0 - stack.omega)
    for l in range(L):
        in_l = state.z_r == l
        d0 = in_l & (state.d_r == 0)
        d1 = in_l & (state.d_r == 1)
        n0 = float(d0.sum())
        n1 = float(d1.sum())
        prec = 1.0 / hypers.u2_xi_r + (n0 + slope2[l] ** 2 * n1) / u_r2
        num = nu / hypers.u2_xi_r + (state.r[d0].sum()
                                     + slope2[l] * (state.r[d1] - icpt2[l]).sum()) / u_r2
        stack.xi[l] = rng.normal(num / prec, 1.0 / np.sqrt(prec))

    for l in range(L):
        in_l = state.z_r == l
        d1 = in_l & (state.d_r == 1)
        n1 = float((in_l & (state.d_r == 0)).sum())
        n2 = float(d1.sum())
        r1 = state.r[d1]
        xi_l = stack.xi[l]

        def logtarget(u):
            om = 1.0 / (1.0 + np.exp(-u))
            if not (OMEGA_EPS <= om <= 1.0 - OMEGA_EPS):
                return -np.inf
            a2l = (nu - om * xi_l) / (1.0 - om)
            return ((hypers.a_omega_r + n1) * np.log(om)
                    + (hypers.b_omega_r + n2) * np.log1p(-om)
                    - float(((r1 - a2l) ** 2).sum()) / (2.0 * u_r2))

        u0 = float(np.log(stack.omega[l]) - np.log1p(-stack.omega[l]))
        cur = logtarget(u0)
        cand = u0 + omega_scale * rng.standard_normal()
        if np.log(rng.random()) < logtarget(cand) - cur:
            stack.omega[l] = np.clip(1.0 / (1.0 + np.exp(-cand)),
                                     OMEGA_EPS, 1.0 - OMEGA_EPS)

    a1, a2 = stack.atoms()
    loc = np.where(state.d_r == 0, a1[state.z_r], a2[state.z_r])
    prec = 1.0 / u_r2 + J / sigma2
    mean = (loc / u_r2 + sw / sigma2) / prec
    state.r = rng.normal(mean, 1.0 / np.sqrt(prec))
    _guard("r_stack", state, state.r, stack.V, stack.omega, stack.xi)
    return state


# ---------------------------------------------------------------------------
# initialization, sweep, chain driver
# ---------------------------------------------------------------------------

def _uniform_sticks(L: int) -> np.ndarray:
    V = 1.0 / (L - np.arange(L, dtype=float))
    V[-1] = 1.0
    return V


def init_chain_state(data: ModelData, hypers: HyperConfig, rng) -> ChainState:
    """Data-driven starting point: size factors at log totals, baselines
    at per-feature residual means, stacks seeded from empirical
    quantiles, everything else near its prior center."""
    N, J = data.lo.shape
    K = hypers.K

    y_mid = np.where(np.isfinite(data.lo), data.lo, np.log(0.01))
    totals_log = np.log(np.maximum(np.exp(np.where(np.isfinite(data.lo), data.lo, -np.inf)).sum(axis=1), 1e-3))
    r0 = np.where(np.isfinite(totals_log), totals_log, hypers.nu_r)

    alpha_hat_samples = y_mid - r0[:, None]
    if data.subject_mode:
        S = data.n_subjects
        sums = np.zeros((S, J))
        np.add.at(sums, data.subject_codes, alpha_hat_samples)
        n_per = np.bincount(data.subject_codes, minlength=S).astype(float)
        alpha_hat = sums / n_per[:, None]
    else:
        alpha_hat = alpha_hat_samples.mean(axis=0)

    La = hypers.L_alpha
    qs = np.linspace(0.05, 0.95, La)
    if data.subject_mode:
        xi_a = np.quantile(alpha_hat, qs, axis=0).T                 # (J, La)
        xi_a += rng.normal(0.0, 1e-3, size=xi_a.shape)
        z_a = np.argmin(np.abs(alpha_hat[:, :, None] - xi_a[None, :, :]), axis=2)
        d_a = np.zeros_like(z_a)
    else:
        xi_a = np.quantile(alpha_hat, qs) + rng.normal(0.0, 1e-3, size=La)
        z_a = np.argmin(np.abs(alpha_hat[:, None] - xi_a[None, :]), axis=1)
        d_a = np.zeros_like(z_a)
    V_a = _uniform_sticks(La)
    alpha_stack = ConstrainedDpStack(
        L=La, V=V_a, psi=stick_break(V_a),
        omega=np.full(La, 0.5), xi=xi_a, nu=hypers.nu_alpha, kernel_sd=0.0)
    a1, a2 = alpha_stack.atoms()
    if data.subject_mode:
        j_idx = np.broadcast_to(np.arange(J), z_a.shape)
        alpha0 = a1[j_idx, z_a]
    else:
        alpha0 = a1[z_a]

    Lr = hypers.L_r
    xi_r = np.quantile(r0, np.linspace(0.05, 0.95, Lr)) + rng.normal(0.0, 1e-3, size=Lr)
    z_r = np.argmin(np.abs(r0[:, None] - xi_r[None, :]), axis=1)
    d_r = np.zeros_like(z_r)
    V_r = _uniform_sticks(Lr)
    r_stack = ConstrainedDpStack(
        L=Lr, V=V_r, psi=stick_break(V_r),
        omega=np.full(Lr, 0.5), xi=xi_r, nu=hypers.nu_r,
        kernel_sd=float(np.sqrt(hypers.u_r2)))

    pc = data.x_cov.shape[1]
    pm = data.x_mean.shape[1]
    factor = DirHsState(
        tau=np.full(K, hypers.a_tau * J / hypers.b_tau),
        phi=np.full((K, J), 1.0 / J),
        zeta=np.ones((J, K)),
        Q=rng.normal(0.0, 0.1, size=(J, K)),
        nu_aux=np.ones((J, K)),
    )
    state = ChainState(
        factor=factor,
        F=rng.normal(0.0, 1.0, size=(K, pc)),
        sigma2=1.0,
        eta=np.zeros((N, K)),
        beta=np.zeros((J, pm)),
        r=r0,
        alpha=alpha0,
        alpha_stack=alpha_stack,
        z_alpha=z_a,
        d_alpha=d_a,
        r_stack=r_stack,
        z_r=z_r,
        d_r=d_r,
        ytilde=np.zeros((N, J)),
    )
    # Start each latent log count inside its bin (clipped toward the top
    # edge for large counts, whose bins are narrower than 0.4).
    hi_edge = np.where(np.isfinite(data.hi), np.nextafter(data.hi, -np.inf), data.hi)
    mid = np.where(np.isfinite(data.lo), data.lo, data.hi - 1.0) + 0.4
    state.ytilde = np.minimum(np.maximum(mid, data.lo), hi_edge)
    return state


def prior_chain_state(data: ModelData, hypers: HyperConfig, rng) -> ChainState:
    """Exact draw of the full chain state from the prior (latent factors
    and log counts included); the backbone of sampler-correctness tests."""
    N, J = data.lo.shape
    K = hypers.K
    pc = data.x_cov.shape[1]
    pm = data.x_mean.shape[1]
    factor = sample_dirhs_prior(
        DirHsHyper(a_phi=hypers.a_phi, a_tau=hypers.a_tau, b_tau=hypers.b_tau, K=K),
        J, rng)
    factor.phi = np.maximum(factor.phi, 1e-300)
    factor.phi /= factor.phi.sum(axis=1, keepdims=True)

    alpha_stack = sample_stack_prior(
        rng, hypers.L_alpha, hypers.c_alpha,
        hypers.a_omega_alpha, hypers.b_omega_alpha,
        nu=hypers.nu_alpha, atom_sd=float(np.sqrt(hypers.u2_alpha)),
        kernel_sd=0.0,
        n_features=J if data.subject_mode else None)
    if data.subject_mode:
        alpha, z_a, d_a = sample_alpha_prior(alpha_stack, (data.n_subjects, J), rng)
    else:
        alpha, z_a, d_a = sample_alpha_prior(alpha_stack, J, rng)

    r_stack = sample_stack_prior(
        rng, hypers.L_r, hypers.c_r, hypers.a_omega_r, hypers.b_omega_r,
        nu=hypers.nu_r, atom_sd=float(np.sqrt(hypers.u2_xi_r)),
        kernel_sd=float(np.sqrt(hypers.u_r2)))
    r, z_r, d_r = sample_r_prior(r_stack, N, rng)

    state = ChainState(
        factor=factor,
        F=rng.normal(0.0, 1.0, size=(K, pc)),
        sigma2=1.0 / rng.gamma(hypers.a_sigma, 1.0 / hypers.b_sigma),
        eta=rng.normal(0.0, 1.0, size=(N, K)),
        beta=rng.normal(0.0, np.sqrt(hypers.u2_beta), size=(J, pm)),
        r=r,
        alpha=alpha,
        alpha_stack=alpha_stack,
        z_alpha=z_a,
        d_alpha=d_a,
        r_stack=r_stack,
        z_r=z_r,
        d_r=d_r,
        ytilde=np.zeros((N, J)),
    )
    state.ytilde = mean_matrix(state, data) \
        + np.sqrt(state.sigma2) * rng.standard_normal((N, J))
    return state


def rebind_counts_to_latents(state: ChainState, data: ModelData,
                             count_cap: float = 1e9):
    """Recompute the count bounds from the current latent log counts:
    y = min(floor(exp(ytilde)), cap), with a right-open top bin at the
    cap so the likelihood stays consistent when heavy prior tails throw
    latents beyond float-representable counts."""
    with np.errstate(over="ignore"):
        y = np.floor(np.exp(state.ytilde))
    y = np.minimum(y, count_cap)
    with np.errstate(divide="ignore"):
        data.lo = np.where(y > 0, np.log(y), -np.inf)
    data.hi = np.where(y >= count_cap, np.inf, np.log1p(y))
    return y


def simulate_counts_given_state(state: ChainState, data: ModelData, rng,
                                count_cap: float = 1e9):
    """Redraw (eta, ytilde) from the model given the parameters, floor
    the exponentiated latents into counts, and rewrite the bounds in
    `data`.  Used by the joint-distribution (Geweke-style) tests."""
    N, K = state.eta.shape
    state.eta = rng.normal(0.0, 1.0, size=(N, K))
    m = mean_matrix(state, data)
    state.ytilde = m + np.sqrt(state.sigma2) * rng.standard_normal(m.shape)
    return rebind_counts_to_latents(state, data, count_cap)


def make_proposals(data: ModelData, hypers: HyperConfig,
                   config: SamplerConfig) -> tuple[list[AdaptiveRW], list[AdaptiveRW]]:
    J = data.n_features
    pc = data.x_cov.shape[1]
    prop_phi = [AdaptiveRW(max(J - 1, 1), config.initial_scale,
                           config.target_accept, config.adapt_start)
                for _ in range(hypers.K)]
    prop_f = [AdaptiveRW(pc, config.initial_scale,
                         config.target_accept, config.adapt_start)
              for _ in range(hypers.K)]
    return prop_phi, prop_f


def sweep(state: ChainState, data: ModelData, hypers: HyperConfig, rng,
          prop_phi: list[AdaptiveRW], prop_f: list[AdaptiveRW],
          omega_scale: float = 0.6) -> ChainState:
    """One full Gibbs sweep in the fixed block order."""
    update_latent_y(state, data, rng)
    update_eta(state, data, rng)
    update_q(state, data, rng)
    update_zeta(state, rng)
    update_tau(state, hypers, rng)
    update_phi(state, hypers, rng, prop_phi)
    update_f(state, data, rng, prop_f)
    update_sigma2(state, data, hypers, rng)
    update_beta(state, data, hypers, rng)
    update_alpha_stack(state, data, hypers, rng, omega_scale)
    update_r_stack(state, data, hypers, rng, omega_scale)
    state.iteration += 1
    return state


_SAVED_PARAMS = ("q", "f", "sigma2", "beta", "alpha", "r")


def run_chain(counts: CountTable, design: CovariateDesign, hypers: HyperConfig,
              config: SamplerConfig, chain_id: int = 0, progress=None):
    """Run one chain and return it as a DrawStore (single chain).

    Fully reproducible from (inputs, config.seed, chain_id).  Raises
    NumericsError with the iteration and block name if any state
    component goes non-finite.
    """
    from .posterior import DrawStore  # local import; posterior reads stores

    data = ModelData.from_table(counts, design)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                       spawn_key=(chain_id,)))
    state = init_chain_state(data, hypers, rng)
    prop_phi, prop_f = make_proposals(data, hypers, config)

    draws: dict[str, list[np.ndarray]] = {name: [] for name in _SAVED_PARAMS}
    for it in range(config.n_iter):
        if it == config.n_burn:
            for prop in prop_phi + prop_f:
                prop.freeze()
        sweep(state, data, hypers, rng, prop_phi, prop_f, config.omega_mh_scale)
        if it >= config.n_burn and (it - config.n_burn) % config.thin == 0:
            draws["q"].append(state.factor.Q.copy())
            draws["f"].append(state.F.copy())
            draws["sigma2"].append(np.float64(state.sigma2))
            draws["beta"].append(state.beta.copy())
            draws["alpha"].append(np.array(state.alpha, copy=True))
            draws["r"].append(state.r.copy())
        if progress is not None and (it + 1) % max(1, config.n_iter // 20) == 0:
            progress(it + 1, config.n_iter)

    stacked = {name: np.stack(vals) for name, vals in draws.items()}
    stats = {
        "accept_phi": [p.frozen_accept_rate for p in prop_phi],
        "accept_f": [p.frozen_accept_rate for p in prop_f],
    }
    manifest = {
        "seed": config.seed,
        "chain_ids": [chain_id],
        "sampler": config.to_dict(),
        "hypers": hypers.to_dict(),
        "subject_mode": data.subject_mode,
        "n_samples": data.n_samples,
        "n_features": data.n_features,
        "n_subjects": data.n_subjects,
        "feature_names": counts.feature_names,
        "sample_ids": counts.sample_ids,
        "cov_design": {"names": ["intercept"] + design.cov_names(),
                       "x": [[float(v) for v in row] for row in data.x_cov]},
        "mean_names": design.mean_names(),
        "shapes": {name: list(arr.shape[1:]) for name, arr in stacked.items()},
        "chains": [{"chain_id": chain_id, "acceptance": stats}],
    }
    return DrawStore(chains=[stacked], manifest=manifest)


# ---------------------------------------------------------------------------
# joint log density (used by the detailed-balance and correctness tests)
# ---------------------------------------------------------------------------

def _norm_logpdf(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _invgamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _gamma_logpdf(x, a, rate):
    return a * np.log(rate) - gammaln(a) + (a - 1.0) * np.log(x) - rate * x


def _beta_logpdf(x, a, b):
    return ((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)
            + gammaln(a + b) - gammaln(a) - gammaln(b))


def log_joint(state: ChainState, data: ModelData, hypers: HyperConfig) -> float:
    """Log density of the augmented state (parameters, latent factors,
    latent log counts, mixture indicators) under the full model, up to
    the data-independent constant.  Returns -inf if a latent log count
    sits outside its bin."""
    if np.any(state.ytilde < data.lo) or np.any(state.ytilde >= data.hi):
        return -np.inf
    fac = state.factor
    J = data.n_features
    out = 0.0
    out += _norm_logpdf(state.ytilde, mean_matrix(state, data), state.sigma2).sum()
    out += _norm_logpdf(state.eta, 0.0, 1.0).sum()

    prior_var = fac.zeta ** 2 * fac.phi.T * fac.tau[None, :]
    out += _norm_logpdf(fac.Q, 0.0, prior_var).sum()
    zeta2 = fac.zeta ** 2
    out += _invgamma_logpdf(zeta2, 0.5, 1.0 / fac.nu_aux).sum()
    out += _invgamma_logpdf(fac.nu_aux, 0.5, 1.0).sum()
    out += _gamma_logpdf(fac.tau, hypers.a_tau, hypers.b_tau / J).sum()
    out += ((hypers.a_phi - 1.0) * np.log(fac.phi)).sum()
    out += _norm_logpdf(state.F, 0.0, 1.0).sum()
    out += _invgamma_logpdf(state.sigma2, hypers.a_sigma, hypers.b_sigma)
    if state.beta.size:
        out += _norm_logpdf(state.beta, 0.0, hypers.u2_beta).sum()

    for stack, z, d, c, a_om, b_om, u2_xi in (
            (state.alpha_stack, state.z_alpha, state.d_alpha,
             hypers.c_alpha, hypers.a_omega_alpha, hypers.b_omega_alpha,
             hypers.u2_alpha),
            (state.r_stack, state.z_r, state.d_r,
             hypers.c_r, hypers.a_omega_r, hypers.b_omega_r, hypers.u2_xi_r)):
        out += _beta_logpdf(stack.V[:-1], 1.0, c).sum()
        out += _beta_logpdf(stack.omega, a_om, b_om).sum()
        out += _norm_logpdf(stack.xi, stack.nu, u2_xi).sum()
        log_psi = np.log(stack.psi)
        out += log_psi[z].sum()
        log_w = np.log(np.stack([stack.omega, 1.0 - stack.omega], axis=-1))
        out += log_w[z, d].sum()

    a1, a2 = state.r_stack.atoms()
    loc = np.where(state.d_r == 0, a1[state.z_r], a2[state.z_r])
    out += _norm_logpdf(state.r, loc, state.r_stack.kernel_sd ** 2).sum()

    a1, a2 = state.alpha_stack.atoms()
    if data.subject_mode:
        j_idx = np.broadcast_to(np.arange(J), state.z_alpha.shape)
        expect = np.where(state.d_alpha == 0,
                          a1[j_idx, state.z_alpha], a2[j_idx, state.z_alpha])
    else:
        expect = np.where(state.d_alpha == 0,
                          a1[state.z_alpha], a2[state.z_alpha])
    if not np.allclose(state.alpha, expect, atol=1e-10):
        raise ValueError("alpha inconsistent with its stack indicators")
    return float(out)
