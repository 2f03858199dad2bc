"""Prior densities and samplers.

Covers the Dirichlet-horseshoe shrinkage prior on the local loadings and
the truncated, mean-constrained Dirichlet-process stacks used for feature
baselines and sample size factors.  Every component of a constrained
stack is a two-atom (or two-kernel) mixture whose mean equals the fixed
target nu, which is what pins the prior and posterior means of the
mixed-over quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Inner weights are kept strictly inside (0, 1): at the endpoints the
# second atom (nu - omega*xi)/(1 - omega) degenerates.
OMEGA_EPS = 1e-6


@dataclass
class DirHsHyper:
    """Fixed hyperparameters of the Dirichlet-horseshoe prior."""

    a_phi: float
    a_tau: float
    b_tau: float
    K: int

    def __post_init__(self):
        if min(self.a_phi, self.a_tau, self.b_tau) <= 0 or self.K < 1:
            raise ValueError("Dir-HS hyperparameters must be positive, K >= 1")


@dataclass
class DirHsState:
    """One realization of the shrinkage hierarchy.

    tau     (K,)   global per-factor scales
    phi     (K, J) per-factor simplex weights over features
    zeta    (J, K) local half-Cauchy scales
    Q       (J, K) local loadings
    nu_aux  (J, K) inverse-gamma expansion variables for zeta^2
    """

    tau: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    Q: np.ndarray
    nu_aux: np.ndarray | None = None

    def validate(self):
        K, J = self.phi.shape
        if self.tau.shape != (K,) or self.Q.shape != (J, K) or self.zeta.shape != (J, K):
            raise ValueError("inconsistent Dir-HS state shapes")
        if np.any(self.tau <= 0) or np.any(self.zeta <= 0):
            raise ValueError("tau and zeta must be positive")
        if np.any(self.phi <= 0) or not np.allclose(self.phi.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("each phi_k must be a strictly positive simplex vector")
        return self


def sample_half_cauchy_expanded(rng: np.random.Generator, shape):
    """Draw (zeta2, nu_aux) from the inverse-gamma expansion of C+(0,1).

    zeta2 | nu ~ inv-Ga(1/2, 1/nu), nu ~ inv-Ga(1/2, 1); marginally
    sqrt(zeta2) is standard half-Cauchy.  The expansion makes the Gibbs
    update of zeta2 conjugate.
    """
    nu_aux = 1.0 / rng.gamma(0.5, 1.0, size=shape)
    zeta2 = 1.0 / rng.gamma(0.5, nu_aux, size=shape)
    return zeta2, nu_aux


def sample_dirhs_prior(hyper: DirHsHyper, J: int, rng: np.random.Generator) -> DirHsState:
    """Draw a full Dir-HS state for J features and hyper.K factors."""
    K = hyper.K
    tau = rng.gamma(hyper.a_tau, J / hyper.b_tau, size=K)
    phi = rng.dirichlet(np.full(J, hyper.a_phi), size=K)
    zeta2, nu_aux = sample_half_cauchy_expanded(rng, (J, K))
    sd = np.sqrt(zeta2 * phi.T * tau[np.newaxis, :])
    Q = rng.normal(0.0, 1.0, size=(J, K)) * sd
    return DirHsState(tau=tau, phi=phi, zeta=np.sqrt(zeta2), Q=Q, nu_aux=nu_aux)


def stick_break(V) -> np.ndarray:
    """Convert stick fractions V (last entry pinned at 1) to weights.

    psi_1 = V_1, psi_l = V_l * prod_{l'<l} (1 - V_l'); pinning V_L = 1
    makes the truncated weights sum to one exactly.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 1 or V.size < 1:
        raise ValueError("V must be a non-empty vector")
    if np.any(V <= 0) or np.any(V > 1):
        raise ValueError("stick fractions must lie in (0, 1]")
    if V[-1] != 1.0:
        raise ValueError("last stick fraction must be exactly 1")
    remainder = np.concatenate(([1.0], np.cumprod(1.0 - V[:-1])))
    return V * remainder


def constrained_atom_pair(xi, omega, nu):
    """Atom pair (xi, (nu - omega*xi)/(1-omega)) whose omega-mixture mean
    is exactly nu."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0) or np.any(omega >= 1):
        raise ValueError("omega must lie strictly in (0, 1)")
    xi = np.asarray(xi, dtype=float)
    return xi, (nu - omega * xi) / (1.0 - omega)


@dataclass
class ConstrainedDpStack:
    """Truncated mean-constrained DP mixture.

    xi holds the first-atom locations: shape (L,) for a shared stack or
    (J, L) when every feature keeps its own locations.  kernel_sd = 0
    gives point-mass atoms (baselines); kernel_sd > 0 gives normal
    kernels of that spread (size factors).
    """

    L: int
    V: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    xi: np.ndarray
    nu: float
    kernel_sd: float = 0.0

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)

    @property
    def per_feature(self) -> bool:
        return self.xi.ndim == 2

    def atoms(self):
        """First and second atom locations, shapes matching xi."""
        return constrained_atom_pair(self.xi, self.omega, self.nu)

    def validate(self):
        if self.V.shape != (self.L,) or self.psi.shape != (self.L,):
            raise ValueError("V and psi must have length L")
        if self.omega.shape != (self.L,):
            raise ValueError("omega must have length L")
        if self.xi.shape[-1] != self.L:
            raise ValueError("xi must have trailing dimension L")
        np.testing.assert_allclose(self.psi, stick_break(self.V), rtol=0, atol=1e-12)
        if np.any(self.omega <= 0) or np.any(self.omega >= 1):
            raise ValueError("omega entries must lie in (0, 1)")
        return self


def sample_stack_prior(
    rng: np.random.Generator,
    L: int,
    concentration: float,
    a_omega: float,
    b_omega: float,
    nu: float,
    atom_sd: float,
    kernel_sd: float = 0.0,
    n_features: int | None = None,
) -> ConstrainedDpStack:
    """Draw stack parameters (sticks, inner weights, atom locations) from
    their priors.  n_features switches to per-feature atom locations."""
    V = np.empty(L)
    V[:-1] = rng.beta(1.0, concentration, size=L - 1)
    V[-1] = 1.0
    V[:-1] = np.clip(V[:-1], 1e-12, 1.0 - 1e-12)
    omega = np.clip(rng.beta(a_omega, b_omega, size=L), OMEGA_EPS, 1.0 - OMEGA_EPS)
    shape = (L,) if n_features is None else (n_features, L)
    xi = rng.normal(nu, atom_sd, size=shape)
    return ConstrainedDpStack(L=L, V=V, psi=stick_break(V), omega=omega,
                              xi=xi, nu=nu, kernel_sd=kernel_sd)


def sample_alpha_prior(stack: ConstrainedDpStack, size, rng: np.random.Generator):
    """Draw baselines from the stack: choose outer component l with
    probability psi_l, then the first atom with probability omega_l.

    size is J for a shared stack, or (S, J) in per-feature mode (each
    subject-feature pair draws its own component; locations vary by
    feature, sticks and inner weights are shared).

    Returns (alpha, outer_idx, inner_idx); inner_idx is 0 for the first
    atom, 1 for the balancing atom.
    """
    if stack.kernel_sd != 0.0:
        raise ValueError("alpha stack must have point-mass atoms (kernel_sd 0)")
    if stack.per_feature:
        S, J = size
        if stack.xi.shape[0] != J:
            raise ValueError("per-feature stack has wrong number of features")
        shape = (S, J)
    else:
        shape = (int(size),)
    z = rng.choice(stack.L, size=shape, p=stack.psi)
    d = (rng.random(shape) >= stack.omega[z]).astype(np.int64)
    a1, a2 = stack.atoms()
    if stack.per_feature:
        j_idx = np.broadcast_to(np.arange(shape[1]), shape)
        alpha = np.where(d == 0, a1[j_idx, z], a2[j_idx, z])
    else:
        alpha = np.where(d == 0, a1[z], a2[z])
    return alpha, z, d


def sample_r_prior(stack: ConstrainedDpStack, n: int, rng: np.random.Generator):
    """Draw size factors: like the baseline stack but the two atoms are
    normal kernels with spread kernel_sd."""
    if stack.per_feature:
        raise ValueError("size-factor stack is always shared")
    z = rng.choice(stack.L, size=n, p=stack.psi)
    d = (rng.random(n) >= stack.omega[z]).astype(np.int64)
    a1, a2 = stack.atoms()
    loc = np.where(d == 0, a1[z], a2[z])
    r = rng.normal(loc, stack.kernel_sd) if stack.kernel_sd > 0 else loc.copy()
    return r, z, d
