"""Bayesian covariate-varying sparse factor model for multivariate
count tables: simulation, MCMC fitting, and posterior evaluation."""

from .calibrate import HyperConfig, choose_k_by_pca, default_hypers
from .data import CountTable, CovariateDesign, read_counts, read_design
from .model import (
    FactorLoadingParams,
    MeanParams,
    loading_at,
    lognormal_moments,
    mu_at,
    rounded_pmf,
    sigma_at,
)
from .posterior import DrawStore, diagnostics, rmse_correlations, summarize
from .sampler import SamplerConfig, run_chain

__version__ = "0.1.0"

__all__ = [
    "CountTable", "CovariateDesign", "DrawStore", "FactorLoadingParams",
    "HyperConfig", "MeanParams", "SamplerConfig", "choose_k_by_pca",
    "default_hypers", "diagnostics", "loading_at", "lognormal_moments",
    "mu_at", "read_counts", "read_design", "rmse_correlations",
    "rounded_pmf", "run_chain", "sigma_at", "summarize",
]
