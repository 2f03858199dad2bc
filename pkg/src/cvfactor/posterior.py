"""Posterior draw storage, summaries, derived quantities, evaluation
metrics, and convergence diagnostics.

A draw store is a directory: manifest.json (run metadata, seed, config
echo, parameter shapes) plus one chain_## subdirectory per chain holding
one delimited text table per parameter, one row per saved draw, columns
labeled by flattened index.  Wall-clock timing lives in a runtime.json
sidecar so stores from identical (inputs, seed) runs are byte-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model
from .data import read_matrix, write_matrix

DEFAULT_PROBS = (0.025, 0.5, 0.975)


@dataclass
class DrawStore:
    """Saved posterior draws: per chain a dict name -> (n_draws, *shape)."""

    chains: list[dict[str, np.ndarray]]
    manifest: dict

    def __post_init__(self):
        counts = {tuple(sorted(ch)) for ch in self.chains}
        if len(counts) > 1:
            raise ValueError("chains disagree on stored parameters")
        for ch in self.chains:
            n = {arr.shape[0] for arr in ch.values()}
            if len(n) > 1:
                raise ValueError("parameters of one chain have unequal draw counts")

    @property
    def names(self) -> list[str]:
        return sorted(self.chains[0])

    @property
    def n_draws(self) -> int:
        return sum(next(iter(ch.values())).shape[0] for ch in self.chains)

    def stacked(self, name: str) -> np.ndarray:
        """All chains concatenated: (total_draws, *shape)."""
        return np.concatenate([ch[name] for ch in self.chains], axis=0)

    def per_chain(self, name: str) -> list[np.ndarray]:
        return [ch[name] for ch in self.chains]

    @classmethod
    def merge(cls, stores: list["DrawStore"]) -> "DrawStore":
        chains = [ch for st in stores for ch in st.chains]
        manifest = dict(stores[0].manifest)
        manifest["chain_ids"] = [cid for st in stores for cid in st.manifest["chain_ids"]]
        manifest["chains"] = [c for st in stores for c in st.manifest.get("chains", [])]
        return cls(chains=chains, manifest=manifest)

    # -- persistence ---------------------------------------------------

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        for c, chain in enumerate(self.chains):
            cdir = out / f"chain_{c:02d}"
            cdir.mkdir(exist_ok=True)
            for name, arr in chain.items():
                flat = arr.reshape(arr.shape[0], -1)
                if flat.shape[1] == 0:
                    continue
                header = _column_labels(name, arr.shape[1:])
                write_matrix(cdir / f"{name}.csv", flat, header)
        return out

    @classmethod
    def load(cls, store_dir) -> "DrawStore":
        store = Path(store_dir)
        mpath = store / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no manifest.json under {store}")
        with open(mpath) as fh:
            manifest = json.load(fh)
        shapes = {name: tuple(sh) for name, sh in manifest["shapes"].items()}
        chains = []
        for cdir in sorted(store.glob("chain_*")):
            chain = {}
            n_draws = None
            for name, shape in shapes.items():
                fpath = cdir / f"{name}.csv"
                if fpath.exists():
                    flat = read_matrix(fpath)
                    chain[name] = flat.reshape(flat.shape[0], *shape)
                    n_draws = flat.shape[0]
            for name, shape in shapes.items():
                if name not in chain:  # zero-size parameter was skipped on save
                    chain[name] = np.zeros((n_draws,) + shape)
            chains.append(chain)
        if not chains:
            raise FileNotFoundError(f"no chain_* directories under {store}")
        return cls(chains=chains, manifest=manifest)


def _column_labels(name: str, shape: tuple) -> list[str]:
    if shape == ():
        return [name]
    return [name + "_" + "_".join(str(i) for i in idx) for idx in np.ndindex(*shape)]


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSummary:
    """Quantiles per scalar component of one quantity.

    labels has one entry per flattened component; values is
    (n_components, len(probs)).  Quantiles use the linear-interpolation
    empirical definition (numpy default).
    """

    quantity: str
    labels: list[str]
    probs: tuple
    values: np.ndarray

    def median(self) -> np.ndarray:
        return self.values[:, self.probs.index(0.5)]

    def to_rows(self, level: str = "") -> list[list]:
        rows = []
        for i, lab in enumerate(self.labels):
            rows.append([self.quantity, lab, level]
                        + [repr(float(v)) for v in self.values[i]])
        return rows

    @staticmethod
    def header(probs) -> list[str]:
        return ["quantity", "index", "level"] + [f"q{p:g}".replace("0.", "") for p in probs]


def summarize_draws(draws: np.ndarray, quantity: str,
                    probs=DEFAULT_PROBS) -> PosteriorSummary:
    """Quantile summary of a (n_draws, *shape) array."""
    probs = tuple(probs)
    if 0.5 not in probs:
        raise ValueError("probs must include the median 0.5")
    flat = np.asarray(draws).reshape(draws.shape[0], -1)
    vals = np.quantile(flat, probs, axis=0).T  # linear interpolation
    return PosteriorSummary(quantity=quantity,
                            labels=_column_labels(quantity, draws.shape[1:]),
                            probs=probs, values=vals)


def summarize(store: DrawStore, quantity: str, probs=DEFAULT_PROBS) -> PosteriorSummary:
    return summarize_draws(store.stacked(quantity), quantity, probs)


# ---------------------------------------------------------------------------
# derived covariance / correlation quantities
# ---------------------------------------------------------------------------

def sigma_draws(store: DrawStore, x) -> np.ndarray:
    """Reconstruct Sigma(x) for every saved draw: (n_draws, J, J)."""
    q = store.stacked("q")
    f = store.stacked("f")
    s2 = store.stacked("sigma2")
    x = model.check_covariate(x, f.shape[2])
    t = f @ x                                   # (n, K)
    lam = q * t[:, None, :]                     # (n, J, K)
    sig = np.einsum("njk,nmk->njm", lam, lam)
    j = np.arange(sig.shape[1])
    sig[:, j, j] += s2[:, None]
    return sig


def corr_from_sigma(sig: np.ndarray) -> np.ndarray:
    """Correlation transform rho_jk = Sigma_jk / sqrt(Sigma_jj Sigma_kk),
    applied per draw; output clipped into [-1, 1]."""
    d = np.sqrt(np.einsum("...jj->...j", sig))
    rho = sig / (d[..., :, None] * d[..., None, :])
    return np.clip(rho, -1.0, 1.0)


def rho_draws(store: DrawStore, x) -> np.ndarray:
    return corr_from_sigma(sigma_draws(store, x))


def rho_median(store: DrawStore, x) -> np.ndarray:
    return np.median(rho_draws(store, x), axis=0)


def rmse_correlations(rho_hat, rho_true) -> float:
    """Root-mean-square error over the strict upper triangle (j < k),
    pooled over all evaluation points.

    Both arguments are (n_points, J, J) stacks (a single matrix is
    promoted); point i of one stack is compared against point i of the
    other.
    """
    rho_hat = np.asarray(rho_hat, dtype=float)
    rho_true = np.asarray(rho_true, dtype=float)
    if rho_hat.ndim == 2:
        rho_hat = rho_hat[None]
    if rho_true.ndim == 2:
        rho_true = rho_true[None]
    if rho_hat.shape != rho_true.shape:
        raise ValueError("estimate and truth stacks must have equal shapes")
    j, k = np.triu_indices(rho_hat.shape[1], k=1)
    diff = rho_hat[:, j, k] - rho_true[:, j, k]
    return float(np.sqrt(np.mean(diff ** 2)))


def beta_contrasts(store: DrawStore, pairs, probs=DEFAULT_PROBS):
    """Summaries of beta[:, p1] - beta[:, p2] for (p1, p2) column pairs.

    Returns a list of (PosteriorSummary, excludes_zero) with
    excludes_zero a per-feature boolean for the outermost interval.
    """
    beta = store.stacked("beta")
    out = []
    for p1, p2 in pairs:
        diff = beta[:, :, p1] - beta[:, :, p2]
        summ = summarize_draws(diff, f"beta[{p1}]-beta[{p2}]", probs)
        lo = summ.values[:, 0]
        hi = summ.values[:, -1]
        out.append((summ, (lo > 0) | (hi < 0)))
    return out


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

def split_rhat(chains: list[np.ndarray]) -> float:
    """Split-chain potential scale reduction.

    Each chain is halved; with m half-chains of length n,
    R-hat = sqrt(((n-1)/n * W + B/n) / W) where W is the mean
    within-chain variance and B the between-chain variance of the means.
    """
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float).ravel()
        h = len(c) // 2
        if h < 2:
            raise ValueError("need at least 4 draws per chain for split R-hat")
        halves.extend([c[:h], c[h:2 * h]])
    n = len(halves[0])
    means = np.array([h.mean() for h in halves])
    vars_ = np.array([h.var(ddof=1) for h in halves])
    w = vars_.mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def ess(chains: list[np.ndarray]) -> float:
    """Effective sample size via autocorrelations with Geyer's initial
    positive-sequence truncation.

    Autocorrelations are estimated per chain (FFT), averaged across
    chains, summed over consecutive lag pairs until a pair sum goes
    negative; ESS = (total draws) / (1 + 2 * sum of kept correlations).
    Constant draws have no information and report 0 with a warning.
    """
    arrs = [np.asarray(c, dtype=float).ravel() for c in chains]
    n = min(len(a) for a in arrs)
    arrs = [a[:n] for a in arrs]
    if all(np.allclose(a, a[0]) for a in arrs):
        warnings.warn("constant draws: ESS undefined, reporting 0")
        return 0.0
    acfs = []
    for a in arrs:
        a = a - a.mean()
        var = a @ a / n
        if var == 0:
            continue
        size = int(2 ** np.ceil(np.log2(2 * n)))
        fa = np.fft.rfft(a, size)
        ac = np.fft.irfft(fa * np.conj(fa), size)[:n].real
        acfs.append(ac / (var * n))
    rho = np.mean(acfs, axis=0)
    total = sum(len(a) for a in arrs)
    s = 0.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        s += pair
        t += 2
    return float(min(total, total / (1.0 + 2.0 * s)))


def extract_trace(store: DrawStore, quantity: str, component: tuple | int = ()):
    """Per-chain 1-D traces of one scalar component."""
    if isinstance(component, int):
        component = (component,)
    return [np.asarray(ch[quantity])[(slice(None),) + tuple(component)]
            for ch in store.chains]


def diagnostics(store: DrawStore, quantities=None) -> dict:
    """Split R-hat and ESS for every scalar component of the requested
    quantities (all stored quantities by default)."""
    out = {}
    for name in (quantities or store.names):
        chains = store.per_chain(name)
        shape = chains[0].shape[1:]
        labels = _column_labels(name, shape)
        flat = [c.reshape(c.shape[0], -1) for c in chains]
        for i, lab in enumerate(labels):
            comp = [f[:, i] for f in flat]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out[lab] = {"ess": ess(comp), "rhat": split_rhat(comp)}
    return out
