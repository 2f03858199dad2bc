"""Deterministic model mathematics.

Covariance regression: the J x J covariance at covariate vector x is

    Sigma(x) = Lambda(x) Lambda(x)' + sigma2 * I,
    Lambda(x)[j, k] = Q[j, k] * (F[k] . x),

so every entry is a sum of K quadratics in x plus a diagonal nugget.
The count distribution rounds a latent log-normal vector: Y = floor(Y*),
Y* = exp(Ytilde*), Ytilde* ~ N(mu(x), Sigma(x)).  Conditionally on the
K latent factors the coordinates decouple and the pmf is a product of
normal-CDF differences; that conditional form is all the sampler needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr


@dataclass
class FactorLoadingParams:
    """Covariance-side parameters: local loadings Q (J x K), global
    covariate coefficients F (K x P), and the diagonal noise sigma2."""

    Q: np.ndarray
    F: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        if self.Q.ndim != 2 or self.F.ndim != 2:
            raise ValueError("Q and F must be 2-D")
        if self.Q.shape[1] != self.F.shape[0]:
            raise ValueError(
                f"factor count mismatch: Q is {self.Q.shape}, F is {self.F.shape}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def n_features(self) -> int:
        return self.Q.shape[0]

    @property
    def n_factors(self) -> int:
        return self.Q.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.F.shape[1]


@dataclass
class MeanParams:
    """Mean-side parameters: size factors r (N,), baselines alpha
    ((J,) shared or (S, J) per subject), and coefficients beta (J, P-1)."""

    r: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.r.ndim != 1:
            raise ValueError("r must be 1-D")
        if self.alpha.ndim not in (1, 2):
            raise ValueError("alpha must be 1-D (shared) or 2-D (per subject)")
        if self.beta.ndim != 2 or self.beta.shape[0] != self.alpha.shape[-1]:
            raise ValueError("beta must be J x (P-1) with J matching alpha")

    @property
    def subject_mode(self) -> bool:
        return self.alpha.ndim == 2


def check_covariate(x, n_covariates: int | None = None) -> np.ndarray:
    """Validate a covariate vector: 1-D, intercept first entry equal to 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("covariate vector must be 1-D and non-empty")
    if x[0] != 1.0:
        raise ValueError("covariate vector must start with the intercept 1")
    if n_covariates is not None and x.size != n_covariates:
        raise ValueError(f"expected {n_covariates} covariates, got {x.size}")
    return x


def loading_at(params: FactorLoadingParams, x) -> np.ndarray:
    """J x K loading matrix at covariate x: entry (j,k) = Q[j,k] * (F[k].x)."""
    x = check_covariate(x, params.n_covariates)
    return params.Q * (params.F @ x)[np.newaxis, :]


def sigma_at(params: FactorLoadingParams, x) -> np.ndarray:
    """Covariance matrix at x: Lambda Lambda' + sigma2 I (symmetric PD,
    smallest eigenvalue >= sigma2)."""
    lam = loading_at(params, x)
    sig = lam @ lam.T
    sig[np.diag_indices_from(sig)] += params.sigma2
    return 0.5 * (sig + sig.T)


def mu_at(params: MeanParams, i: int, x, subject=None) -> np.ndarray:
    """Length-J mean vector for sample i at covariate x.

    The intercept is dropped from x before applying beta; in per-subject
    mode the subject index for sample i is required.
    """
    x = check_covariate(x, params.beta.shape[1] + 1)
    if params.subject_mode:
        if subject is None:
            raise ValueError("subject label required when alpha is per subject")
        alpha = params.alpha[int(subject)]
    else:
        alpha = params.alpha
    return params.r[i] + alpha + params.beta @ x[1:]


def lognormal_moments(mu, Sigma):
    """Mean vector and covariance matrix of exp(Z), Z ~ N(mu, Sigma).

    mean_j = exp(mu_j + Sigma_jj / 2)
    cov_jk = mean_j * mean_k * (exp(Sigma_jk) - 1)
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (mu.size, mu.size):
        raise ValueError("Sigma must be J x J matching mu")
    if not np.allclose(Sigma, Sigma.T, atol=1e-10):
        raise ValueError("Sigma must be symmetric")
    mean = np.exp(mu + 0.5 * np.diag(Sigma))
    cov = np.outer(mean, mean) * np.expm1(Sigma)
    return mean, cov


def _interval_prob(z_lo, z_hi):
    """P(z_lo <= Z < z_hi) for standard normal Z, stable in both tails.

    For intervals entirely beyond |z| = 8 the plain CDF difference
    cancels catastrophically, so the computation switches to log-space
    differences (reflected into the left tail first).
    """
    z_lo, z_hi = np.broadcast_arrays(np.asarray(z_lo, float), np.asarray(z_hi, float))
    far_left = z_hi < -8.0
    far_right = z_lo > 8.0
    central = ~(far_left | far_right)
    out = np.empty(z_lo.shape, dtype=float)

    if central.any():
        out[central] = ndtr(z_hi[central]) - ndtr(z_lo[central])
    for mask, lo, hi in ((far_left, z_lo, z_hi), (far_right, -z_hi, -z_lo)):
        if mask.any():
            la = log_ndtr(lo[mask])
            lb = log_ndtr(hi[mask])
            out[mask] = -np.exp(lb) * np.expm1(la - lb)
    return np.maximum(out, 0.0)


def rounded_pmf(y, m, sigma2: float) -> float:
    """Probability of the count vector y under independent rounded
    log-normal coordinates with log-scale means m and common variance
    sigma2 (the conditional form given the latent factors).

    P(y) = prod_j [ Phi((log(y_j+1)-m_j)/s) - Phi((log y_j - m_j)/s) ]
    with log 0 taken as -inf.
    """
    y = np.asarray(y)
    m = np.asarray(m, dtype=float)
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    if not np.all(y == np.floor(y)):
        raise ValueError("counts must be integers")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    yf = y.astype(float)
    sd = np.sqrt(sigma2)
    with np.errstate(divide="ignore"):
        lo = np.where(yf > 0, np.log(yf), -np.inf)
    hi = np.log1p(yf)
    probs = _interval_prob((lo - m) / sd, (hi - m) / sd)
    return float(np.prod(probs))
