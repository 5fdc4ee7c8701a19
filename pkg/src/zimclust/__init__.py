"""Model-based clustering of single-cell count data with zero-inflated
Poisson and negative binomial mixtures."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .data import (
    CountMatrix,
    CovariateMatrix,
    SizeFactors,
    compute_size_factors,
    filter_genes_iqr,
    load_counts,
    select_top_sd,
)
from .em import EStepResult, FitResult, e_step, run_em
from .likelihood import MixtureData, RegParams, ZinbParams, ZipParams, mixture_loglik
from .selection import RestartPlan, SelectionReport, aic, bic, elbow_select, run_selection
from .simlab import SimConfig, preset, simulate, v_measure

__all__ = [
    "BACKEND",
    "CountMatrix",
    "CovariateMatrix",
    "SizeFactors",
    "compute_size_factors",
    "filter_genes_iqr",
    "load_counts",
    "select_top_sd",
    "EStepResult",
    "FitResult",
    "e_step",
    "run_em",
    "MixtureData",
    "RegParams",
    "ZinbParams",
    "ZipParams",
    "mixture_loglik",
    "RestartPlan",
    "SelectionReport",
    "aic",
    "bic",
    "elbow_select",
    "run_selection",
    "SimConfig",
    "preset",
    "simulate",
    "v_measure",
]
