"""Synthetic heterogeneous-effects lasso for high-dimensional clustered data."""

from .data import (
    BINOMIAL,
    GAUSSIAN,
    ClusteredDataset,
    DataError,
    StackedDesign,
    SyntheticDesign,
    canonicalize,
    load_csv,
    stack_design,
)
from .solver import (
    PenalizedFit,
    SolverConfig,
    SolverError,
    fit_binomial,
    fit_gaussian,
    lambda_path,
    soft_threshold,
)

__all__ = [
    "BINOMIAL",
    "GAUSSIAN",
    "ClusteredDataset",
    "DataError",
    "StackedDesign",
    "SyntheticDesign",
    "canonicalize",
    "load_csv",
    "stack_design",
    "PenalizedFit",
    "SolverConfig",
    "SolverError",
    "fit_binomial",
    "fit_gaussian",
    "lambda_path",
    "soft_threshold",
]

__version__ = "0.1.0"
