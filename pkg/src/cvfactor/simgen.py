"""Ground-truth simulation generators.

Three scenarios at increasing difficulty:

  sim1 - six categorical conditions (binary x ternary), rank-2 loading
         truth with conditions where one factor's contribution vanishes.
  sim2 - repeated samples per subject, baseline + covariate-dependent
         loadings, per-feature three-atom baselines producing excess
         zeros and large inter-subject spread.
  sim3 - covariance varying arbitrarily with one binary condition,
         generated by the vine method from sparsified partial
         correlations; the rest of the setup follows sim2.

Every generator is deterministic in its seed, with separate substreams
for truth parameters and observation noise so the noise can be varied
while holding the truth fixed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import COUNT_MAX, CountTable, CovariateDesign, write_counts, write_design, write_matrix, read_matrix

logger = logging.getLogger(__name__)


@dataclass
class SimTruth:
    """Ground truth needed by the evaluation harness."""

    scenario: str
    seed: int
    sigma_true: np.ndarray        # (n_eval, J, J)
    eval_x: np.ndarray            # (n_eval, P_eval) incl. intercept
    eval_names: list[str]         # covariate names of eval_x (after intercept)
    mu_true: np.ndarray           # (N, J)
    beta_true: np.ndarray         # (J, P-1)
    alpha_true: np.ndarray        # (J,) or (S, J)
    r_true: np.ndarray            # (N,)
    latent: np.ndarray            # (N, J) latent log counts
    suggested_roles: dict = field(default_factory=dict)

    def rho_true(self) -> np.ndarray:
        d = np.sqrt(np.einsum("njj->nj", self.sigma_true))
        return self.sigma_true / (d[:, :, None] * d[:, None, :])


def counts_from_latent(latent: np.ndarray) -> np.ndarray:
    """floor(exp(latent)), capped at the largest exactly-representable
    count."""
    with np.errstate(over="ignore"):
        y = np.floor(np.exp(latent))
    return np.minimum(y, COUNT_MAX).astype(np.int64)


def _sparse_shifted_normal(rng, shape, p_zero=0.5, shift=1.0):
    """Zero with probability p_zero, otherwise N(0,1) moved away from
    zero by `shift` in the direction of its sign."""
    v = rng.normal(0.0, 1.0, size=shape)
    v = v + np.sign(v) * shift
    keep = rng.random(shape) >= p_zero
    return v * keep


def _mvn_rows(rng, mu: np.ndarray, chols: np.ndarray) -> np.ndarray:
    """Row i ~ N(mu[i], L_i L_i') given per-row Cholesky factors."""
    z = rng.standard_normal(mu.shape)
    return mu + np.einsum("njk,nk->nj", chols, z)


# ---------------------------------------------------------------------------
# scenario 1
# ---------------------------------------------------------------------------

def gen_sim1(seed: int, J: int = 15, per_condition: int = 5):
    """Six-condition categorical design, N = 6 * per_condition samples.

    Returns (CountTable, CovariateDesign, SimTruth)."""
    ss = np.random.SeedSequence(seed)
    truth_rng, noise_rng = [np.random.default_rng(c) for c in ss.spawn(2)]

    conditions = [(b, t) for b in (0, 1) for t in (0, 1, 2)]
    rows = []
    for b, t in conditions:
        rows += [[1.0, b, float(t == 1), float(t == 2)]] * per_condition
    X = np.asarray(rows)
    n = len(X)

    K = 2
    q = _sparse_shifted_normal(truth_rng, (J, K), p_zero=0.5, shift=1.0)
    f = truth_rng.uniform(-1.0, 1.0, size=(K, 4))
    f[0, 0] = -f[0, 2]   # factor 1 drops out at x = (1, 0, 1, 0)
    f[1, 0] = -f[1, 1]   # factor 2 drops out at x = (1, 1, 0, 0)
    sigma2 = 0.25

    r = truth_rng.uniform(0.0, 2.0, size=n)
    pick = truth_rng.random(J) < 0.3
    alpha = np.where(pick, truth_rng.normal(-1.0, 1.0, size=J),
                     truth_rng.normal(5.0, 0.5, size=J))
    beta = _sparse_shifted_normal(truth_rng, (J, 3), p_zero=0.5, shift=1.0)

    mu = r[:, None] + alpha[None, :] + X[:, 1:] @ beta.T
    t_scores = X @ f.T                              # (n, K)
    lam = q[None, :, :] * t_scores[:, None, :]      # (n, J, K)
    sigma = np.einsum("njk,nmk->njm", lam, lam)
    sigma[:, np.arange(J), np.arange(J)] += sigma2
    chols = np.linalg.cholesky(sigma)
    latent = _mvn_rows(noise_rng, mu, chols)
    counts = counts_from_latent(latent)

    names = ["x_bin", "x_cat2", "x_cat3"]
    table = CountTable(counts=counts,
                       sample_ids=[f"s{i:03d}" for i in range(n)],
                       feature_names=[f"otu{j:03d}" for j in range(J)])
    design = CovariateDesign(X=X, names=names)
    truth = SimTruth(scenario="sim1", seed=seed,
                     sigma_true=sigma, eval_x=X, eval_names=names,
                     mu_true=mu, beta_true=beta, alpha_true=alpha,
                     r_true=r, latent=latent,
                     suggested_roles={nm: "both" for nm in names})
    return table, design, truth


# ---------------------------------------------------------------------------
# scenario 2
# ---------------------------------------------------------------------------

def gen_sim2(seed: int, S: int = 25, J: int = 100):
    """Subject-paired design: each of S subjects contributes one sample
    per binary condition (N = 2S); one continuous subject covariate."""
    ss = np.random.SeedSequence(seed)
    truth_rng, noise_rng = [np.random.default_rng(c) for c in ss.spawn(2)]

    n = 2 * S
    xc_subj = truth_rng.normal(0.0, 1.0, size=S)
    subj = np.repeat(np.arange(S), 2)
    xd = np.tile([0.0, 1.0], S)
    X = np.column_stack([np.ones(n), xc_subj[subj], xd])

    half1 = np.arange(J) < J // 4                   # OTUs 1-25
    half2 = np.arange(J) >= J // 2                  # OTUs 51-100
    lam0 = _sparse_shifted_normal(truth_rng, (J, 2), p_zero=0.0, shift=0.5)
    lam0[~(half1 | half2)] = 0.0
    q = _sparse_shifted_normal(truth_rng, (J, 3), p_zero=0.0, shift=0.5)
    q[~half2] = 0.0
    f = truth_rng.uniform(-1.0, 1.0, size=(3, 3))
    sigma2 = 0.25

    base = lam0 @ lam0.T
    t_scores = X @ f.T
    lam = q[None, :, :] * t_scores[:, None, :]
    sigma = base[None, :, :] + np.einsum("njk,nmk->njm", lam, lam)
    sigma[:, np.arange(J), np.arange(J)] += sigma2

    xi = np.column_stack([
        np.full(J, -5.0),
        truth_rng.normal(2.5, np.sqrt(0.5), size=J),
        truth_rng.normal(5.0, np.sqrt(0.5), size=J),
    ])
    psi = truth_rng.dirichlet([30.0, 40.0, 30.0], size=J)   # (J, 3)
    u = truth_rng.random((S, J))
    comp = (u[:, :, None] >= psi.cumsum(axis=1)[None, :, :]).sum(axis=2)
    alpha = np.take_along_axis(np.broadcast_to(xi, (S, J, 3)),
                               comp[:, :, None], axis=2)[:, :, 0]

    r = truth_rng.uniform(0.0, 2.0, size=n)
    beta = _sparse_shifted_normal(truth_rng, (J, 2), p_zero=0.5, shift=1.0)
    mu = r[:, None] + alpha[subj] + X[:, 1:] @ beta.T

    chols = np.linalg.cholesky(sigma)
    latent = _mvn_rows(noise_rng, mu, chols)
    counts = counts_from_latent(latent)

    names = ["x_cont", "x_bin"]
    table = CountTable(counts=counts,
                       sample_ids=[f"s{i:03d}" for i in range(n)],
                       feature_names=[f"otu{j:03d}" for j in range(J)],
                       subjects=[f"m{s:03d}" for s in subj])
    design = CovariateDesign(X=X, names=names)
    truth = SimTruth(scenario="sim2", seed=seed,
                     sigma_true=sigma, eval_x=X, eval_names=names,
                     mu_true=mu, beta_true=beta, alpha_true=alpha,
                     r_true=r, latent=latent,
                     suggested_roles={nm: "both" for nm in names})
    return table, design, truth


# ---------------------------------------------------------------------------
# scenario 3 and the vine construction
# ---------------------------------------------------------------------------

def partials_to_correlation(P: np.ndarray) -> np.ndarray:
    """Convert a vine of partial correlations to a correlation matrix.

    P[k, i] (k < i) is the partial correlation of variables k and i
    given 0..k-1.  Peeling the conditioning set one variable at a time
    inverts the partial-correlation recursion; every intermediate term
    is itself a vine entry, which is what makes the construction closed.
    """
    d = P.shape[0]
    rho = np.eye(d)
    for k in range(d - 1):
        for i in range(k + 1, d):
            p = P[k, i]
            for l in range(k - 1, -1, -1):
                p = (p * np.sqrt((1.0 - P[l, i] ** 2) * (1.0 - P[l, k] ** 2))
                     + P[l, i] * P[l, k])
            rho[k, i] = rho[i, k] = p
    return rho


def vine_correlation(rng: np.random.Generator, dim: int,
                     zero_threshold: float = 0.8,
                     zero_rule: str = "absolute") -> np.ndarray:
    """Random correlation matrix from vine partial correlations.

    Partials are drawn as linearly transformed Be(1,1) on (-1, 1) and
    sparsified before the recursion: with zero_rule 'absolute' every
    partial with |pc| < zero_threshold is zeroed (the default; the
    literal one-sided pc < threshold rule is available as 'literal' but
    zeroes every negative partial as well).
    """
    if zero_rule not in ("absolute", "literal"):
        raise ValueError("zero_rule must be 'absolute' or 'literal'")
    P = np.zeros((dim, dim))
    for k in range(dim - 1):
        for i in range(k + 1, dim):
            pc = 2.0 * rng.beta(1.0, 1.0) - 1.0
            if zero_rule == "absolute":
                if abs(pc) < zero_threshold:
                    pc = 0.0
            elif pc < zero_threshold:
                pc = 0.0
            P[k, i] = pc
    return partials_to_correlation(P)


def _vine_correlation_pd(seed_seq, dim, zero_threshold=0.8, zero_rule="absolute",
                         max_tries: int = 16) -> np.ndarray:
    """Vine draw with a definiteness recheck; a failing draw is
    regenerated from the next substream (logged).

    Surviving partials are large (|pc| >= threshold), so det(R) is a
    product of many small (1 - pc^2) factors and the matrix is
    legitimately near-singular at scale; the check only rejects draws
    that go materially negative."""
    for attempt, child in enumerate(seed_seq.spawn(max_tries)):
        rho = vine_correlation(np.random.default_rng(child), dim,
                               zero_threshold, zero_rule)
        if np.linalg.eigvalsh(rho).min() > -1e-10:
            return rho
        logger.warning("vine draw %d failed the PD check; regenerating", attempt)
    raise RuntimeError("vine construction kept failing the PD check")


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Factor L with L L' = sigma for sampling; falls back to an
    eigendecomposition with clipped eigenvalues when the matrix is
    singular to machine precision."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(sigma)
        return v * np.sqrt(np.clip(w, 0.0, None))[np.newaxis, :]


def gen_sim3(seed: int, S: int = 25, J: int = 100,
             zero_threshold: float = 0.8, zero_rule: str = "absolute"):
    """Arbitrary covariance per binary condition via the vine method;
    mean structure identical to sim2.

    Sigma_jk(xd) = s2_j(xd) * s2_k(xd) * rho_jk(xd) with
    s2_j ~ Unif(1, 1.5), exactly as specified (so the diagonal carries
    the square of s2_j)."""
    ss = np.random.SeedSequence(seed)
    truth_child, noise_child, vine_ss = ss.spawn(3)
    truth_rng = np.random.default_rng(truth_child)
    noise_rng = np.random.default_rng(noise_child)

    sigma_cond = np.empty((2, J, J))
    for cond, child in zip(range(2), vine_ss.spawn(2)):
        rho = _vine_correlation_pd(child, J, zero_threshold, zero_rule)
        s2 = truth_rng.uniform(1.0, 1.5, size=J)
        sigma_cond[cond] = np.outer(s2, s2) * rho

    n = 2 * S
    xc_subj = truth_rng.normal(0.0, 1.0, size=S)
    subj = np.repeat(np.arange(S), 2)
    xd = np.tile([0.0, 1.0], S)
    X = np.column_stack([np.ones(n), xc_subj[subj], xd])

    xi = np.column_stack([
        np.full(J, -5.0),
        truth_rng.normal(2.5, np.sqrt(0.5), size=J),
        truth_rng.normal(5.0, np.sqrt(0.5), size=J),
    ])
    psi = truth_rng.dirichlet([30.0, 40.0, 30.0], size=J)
    u = truth_rng.random((S, J))
    comp = (u[:, :, None] >= psi.cumsum(axis=1)[None, :, :]).sum(axis=2)
    alpha = np.take_along_axis(np.broadcast_to(xi, (S, J, 3)),
                               comp[:, :, None], axis=2)[:, :, 0]

    r = truth_rng.uniform(0.0, 2.0, size=n)
    beta = _sparse_shifted_normal(truth_rng, (J, 2), p_zero=0.5, shift=1.0)
    mu = r[:, None] + alpha[subj] + X[:, 1:] @ beta.T

    cond_idx = xd.astype(int)
    chols = np.stack([_psd_factor(sigma_cond[0]), _psd_factor(sigma_cond[1])])[cond_idx]
    latent = _mvn_rows(noise_rng, mu, chols)
    counts = counts_from_latent(latent)

    names = ["x_cont", "x_bin"]
    table = CountTable(counts=counts,
                       sample_ids=[f"s{i:03d}" for i in range(n)],
                       feature_names=[f"otu{j:03d}" for j in range(J)],
                       subjects=[f"m{s:03d}" for s in subj])
    design = CovariateDesign(X=X, names=names)
    eval_x = np.asarray([[1.0, 0.0], [1.0, 1.0]])
    truth = SimTruth(scenario="sim3", seed=seed,
                     sigma_true=sigma_cond, eval_x=eval_x, eval_names=["x_bin"],
                     mu_true=mu, beta_true=beta, alpha_true=alpha,
                     r_true=r, latent=latent,
                     suggested_roles={"x_cont": "mean", "x_bin": "both"})
    return table, design, truth


GENERATORS = {"sim1": gen_sim1, "sim2": gen_sim2, "sim3": gen_sim3}


# ---------------------------------------------------------------------------
# truth directory format
# ---------------------------------------------------------------------------

def write_truth(truth_dir, truth: SimTruth):
    out = Path(truth_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "scenario": truth.scenario,
        "seed": truth.seed,
        "n_eval": int(truth.sigma_true.shape[0]),
        "eval_names": truth.eval_names,
        "alpha_shape": list(truth.alpha_true.shape),
        "suggested_roles": truth.suggested_roles,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_matrix(out / "eval_points.csv", truth.eval_x,
                 ["intercept"] + truth.eval_names)
    for p in range(truth.sigma_true.shape[0]):
        write_matrix(out / f"sigma_true_p{p:03d}.csv", truth.sigma_true[p])
    write_matrix(out / "mu_true.csv", truth.mu_true)
    write_matrix(out / "beta_true.csv", truth.beta_true)
    write_matrix(out / "alpha_true.csv", np.atleast_2d(truth.alpha_true))
    write_matrix(out / "r_true.csv", truth.r_true.reshape(-1, 1))
    write_matrix(out / "latent.csv", truth.latent)
    return out


def read_truth(truth_dir) -> SimTruth:
    src = Path(truth_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    eval_x = read_matrix(src / "eval_points.csv")
    sigma = np.stack([read_matrix(src / f"sigma_true_p{p:03d}.csv", skip_header=False)
                      for p in range(meta["n_eval"])])
    alpha = read_matrix(src / "alpha_true.csv", skip_header=False)
    if len(meta["alpha_shape"]) == 1:
        alpha = alpha.ravel()
    return SimTruth(
        scenario=meta["scenario"], seed=meta["seed"],
        sigma_true=sigma, eval_x=eval_x, eval_names=meta["eval_names"],
        mu_true=read_matrix(src / "mu_true.csv", skip_header=False),
        beta_true=read_matrix(src / "beta_true.csv", skip_header=False),
        alpha_true=alpha,
        r_true=read_matrix(src / "r_true.csv", skip_header=False).ravel(),
        latent=read_matrix(src / "latent.csv", skip_header=False),
        suggested_roles=meta.get("suggested_roles", {}),
    )
