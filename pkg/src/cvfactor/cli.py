"""Command-line interface: simulate / fit / summarize / evaluate.

Exit codes: 0 success, 1 user error (bad files, bad config), 2 numerical
abort inside the sampler.  The CVFACTOR_OUT environment variable, when
set, provides the root for relative output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import posterior, simgen
from .calibrate import default_hypers
from .data import DataFormatError, read_counts, read_design, write_counts, write_design
from .posterior import DrawStore, PosteriorSummary, summarize_draws
from .sampler import NumericsError, SamplerConfig, run_chain

_CONFIG_KEYS = {"counts", "design", "out", "subject_column", "roles",
                "hyper", "sampler"}
_SAMPLER_KEYS = {"n_iter", "n_burn", "thin", "seed", "chains", "jobs",
                 "adapt_start", "initial_scale", "target_accept",
                 "omega_mh_scale"}


class UserError(ValueError):
    """Operator mistake: missing file, malformed config, bad flag."""


@dataclass
class RunConfig:
    """Resolved fit configuration."""

    counts: str
    design: str
    out: str | None = None
    subject_column: str = "subject"
    roles: dict | None = None
    hyper: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise UserError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise UserError(f"config {path} must be a JSON object")
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise UserError(f"unknown config keys: {sorted(unknown)}")
        for key in ("counts", "design"):
            if key not in raw:
                raise UserError(f"config must set {key!r}")
        sampler = raw.get("sampler", {})
        bad = set(sampler) - _SAMPLER_KEYS
        if bad:
            raise UserError(f"unknown sampler keys: {sorted(bad)}")
        cfg = cls(counts=raw["counts"], design=raw["design"],
                  out=raw.get("out"), subject_column=raw.get("subject_column", "subject"),
                  roles=raw.get("roles"), hyper=raw.get("hyper", {}),
                  sampler=sampler)
        # paths in the config are relative to the config file
        base = path.parent
        cfg.counts = str((base / cfg.counts).resolve())
        cfg.design = str((base / cfg.design).resolve())
        return cfg


def _resolve_out(out: str | None, default_name: str) -> Path:
    root = os.environ.get("CVFACTOR_OUT")
    if out is None:
        return (Path(root) / default_name) if root else Path(default_name)
    p = Path(out)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_summary_csv(path, summaries, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PosteriorSummary.header(probs))
        for summ, level in summaries:
            w.writerows(summ.to_rows(level))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.scenario not in simgen.GENERATORS:
        raise UserError(f"unknown scenario {args.scenario!r}; "
                        f"choose from {sorted(simgen.GENERATORS)}")
    out = _resolve_out(args.out, f"{args.scenario}_seed{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    gen = simgen.GENERATORS[args.scenario]
    kwargs = {}
    if args.scenario == "sim1":
        if args.features:
            kwargs["J"] = args.features
    else:
        if args.features:
            kwargs["J"] = args.features
        if args.subjects:
            kwargs["S"] = args.subjects
    table, design, truth = gen(args.seed, **kwargs)
    write_counts(out / "counts.csv", table)
    write_design(out / "design.csv", design, table.sample_ids)
    simgen.write_truth(out / "truth", truth)
    manifest = {
        "scenario": args.scenario, "seed": args.seed,
        "n_samples": table.n_samples, "n_features": table.n_features,
        "n_subjects": len(set(table.subjects)) if table.subjects else None,
        "zero_fraction": float((table.counts == 0).mean()),
        "suggested_roles": truth.suggested_roles,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {table.n_samples}x{table.n_features} counts to {out}")
    return 0


def _fit_chain_worker(payload):
    counts, design, hypers, config, chain_id = payload
    return run_chain(counts, design, hypers, config, chain_id=chain_id)


def cmd_fit(args) -> int:
    cfg = RunConfig.from_file(args.config)
    counts = read_counts(cfg.counts, subject_column=cfg.subject_column)
    design = read_design(cfg.design, sample_ids=counts.sample_ids)
    if cfg.roles:
        design.set_roles(cfg.roles)

    hyper_overrides = dict(cfg.hyper)
    k_override = hyper_overrides.pop("K", None)
    try:
        hypers = default_hypers(counts, K=k_override).replace(**hyper_overrides)
    except ValueError as e:
        raise UserError(str(e)) from None

    sampler_cfg = dict(cfg.sampler)
    cfg_chains = sampler_cfg.pop("chains", 1)
    cfg_jobs = sampler_cfg.pop("jobs", 1)
    chains = int(args.chains if args.chains else cfg_chains)
    jobs = int(args.jobs if args.jobs else cfg_jobs)
    if args.iters:
        sampler_cfg["n_iter"] = args.iters
    if args.burn is not None:
        sampler_cfg["n_burn"] = args.burn
    if args.thin:
        sampler_cfg["thin"] = args.thin
    if args.seed is not None:
        sampler_cfg["seed"] = args.seed
    sampler_cfg.setdefault("n_iter", 20000)
    sampler_cfg.setdefault("n_burn", sampler_cfg["n_iter"] // 2)
    try:
        config = SamplerConfig(**sampler_cfg)
    except (TypeError, ValueError) as e:
        raise UserError(f"bad sampler settings: {e}") from None

    out = _resolve_out(args.out or cfg.out, "fit_out")
    t0 = time.perf_counter()
    payloads = [(counts, design, hypers, config, cid) for cid in range(chains)]
    if jobs > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, chains)) as pool:
            stores = list(pool.map(_fit_chain_worker, payloads))
    else:
        stores = [_fit_chain_worker(p) for p in payloads]
    runtime = time.perf_counter() - t0

    store = DrawStore.merge(stores) if len(stores) > 1 else stores[0]
    store.manifest["config_echo"] = {
        "counts": cfg.counts, "design": cfg.design,
        "roles": cfg.roles, "hyper": cfg.hyper, "sampler": cfg.sampler,
        "chains": chains,
    }
    store.save(out)
    with open(out / "runtime.json", "w") as fh:
        json.dump({"runtime_seconds": runtime}, fh)
        fh.write("\n")
    print(f"saved {store.n_draws} draws ({chains} chain(s)) to {out} "
          f"in {runtime:.1f}s")
    return 0


def _load_store(path) -> DrawStore:
    try:
        return DrawStore.load(path)
    except FileNotFoundError as e:
        raise UserError(str(e)) from None


def cmd_summarize(args) -> int:
    store = _load_store(args.store)
    out = _resolve_out(args.out, str(Path(args.store) / "summaries"))
    out.mkdir(parents=True, exist_ok=True)
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    probs = posterior.DEFAULT_PROBS
    written = []
    for target in targets:
        if target in store.names:
            summ = posterior.summarize(store, target, probs)
            _write_summary_csv(out / f"{target}.csv", [(summ, "")], probs)
        elif target in ("rho", "sigma"):
            xs = np.asarray(store.manifest["cov_design"]["x"])
            levels = np.unique(xs, axis=0)
            rows = []
            for x in levels:
                draws = posterior.sigma_draws(store, x)
                if target == "rho":
                    draws = posterior.corr_from_sigma(draws)
                summ = summarize_draws(draws, target, probs)
                rows.append((summ, ",".join(repr(float(v)) for v in x)))
            _write_summary_csv(out / f"{target}.csv", rows, probs)
        elif target == "diagnostics":
            diag = posterior.diagnostics(store)
            with open(out / "diagnostics.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "ess", "rhat"])
                for lab, vals in diag.items():
                    w.writerow([lab, repr(vals["ess"]), repr(vals["rhat"])])
        else:
            raise UserError(f"unknown summarize target {target!r}")
        written.append(target)
    if args.contrasts:
        pairs = []
        for tok in args.contrasts.split(","):
            try:
                p1, p2 = tok.split("-")
                pairs.append((int(p1), int(p2)))
            except ValueError:
                raise UserError(f"bad contrast spec {tok!r}; use like 0-1") from None
        rows = []
        for (summ, excl) in posterior.beta_contrasts(store, pairs, probs):
            rows.append((summ, ""))
        _write_summary_csv(out / "contrasts.csv", rows, probs)
        written.append("contrasts")
    print(f"wrote {', '.join(written)} summaries to {out}")
    return 0


def cmd_evaluate(args) -> int:
    store = _load_store(args.store)
    truth_dir = Path(args.truth)
    if not truth_dir.exists():
        raise UserError(f"truth directory not found: {truth_dir}")
    truth = simgen.read_truth(truth_dir)

    store_names = store.manifest["cov_design"]["names"]
    truth_names = ["intercept"] + truth.eval_names
    if store_names != truth_names:
        raise UserError(
            f"covariance design mismatch: store uses {store_names}, "
            f"truth evaluates {truth_names}; refit with matching roles")

    rho_hat = np.stack([posterior.rho_median(store, x) for x in truth.eval_x])
    rmse = posterior.rmse_correlations(rho_hat, truth.rho_true())

    beta_summ = posterior.summarize(store, "beta")
    lo = beta_summ.values[:, 0].reshape(truth.beta_true.shape)
    hi = beta_summ.values[:, -1].reshape(truth.beta_true.shape)
    covered = (truth.beta_true >= lo) & (truth.beta_true <= hi)

    runtime = None
    rt_path = Path(args.store) / "runtime.json"
    if rt_path.exists():
        with open(rt_path) as fh:
            runtime = json.load(fh).get("runtime_seconds")

    metrics = {
        "rmse_correlation": rmse,
        "coverage_beta_95": float(covered.mean()) if covered.size else None,
        "n_draws": store.n_draws,
        "runtime_seconds": runtime,
    }
    out = Path(args.out) if args.out else Path(args.store) / "metrics.json"
    with open(out, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cvfactor",
        description="Covariate-varying sparse factor model for count tables")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with truth")
    p.add_argument("scenario", choices=sorted(simgen.GENERATORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--features", type=int, default=None,
                   help="override the feature count J")
    p.add_argument("--subjects", type=int, default=None,
                   help="override the subject count S (sim2/sim3)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the sampler on a counts/design pair")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes for concurrent chains")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--burn", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="posterior quantile tables from a store")
    p.add_argument("store")
    p.add_argument("--targets", default="beta,alpha,r,sigma2")
    p.add_argument("--contrasts", default=None,
                   help="beta column pairs like 0-1,2-1")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="metrics against a simulation truth dir")
    p.add_argument("store")
    p.add_argument("truth")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
