"""Variational bilinear matrix completion for sparse patient-by-measurement tables."""

from .data import (
    DataError, NormalizationParams, ObservationMatrix, apply_normalizer, fit_normalizer, invert_normalizer,
    load_csv, mask_fold, missingness_stats, split_folds, write_csv,
)
from .evaluation import EvalReport, GridSearchResult, cross_validate, grid_search, grid_values, mae_report
from .heatmap import render_heatmap_svg
from .inference import FitConfig, FitResult, NumericalError, elbo, fit, sweep, update_bias, update_trait_vector
from .model import (
    Hyperparams, VariationalState, generate_synthetic, init_state, predict_mean, predict_with_variance,
)

__all__ = [
    "DataError", "EvalReport", "FitConfig", "FitResult", "GridSearchResult", "Hyperparams", "NormalizationParams",
    "NumericalError", "ObservationMatrix", "VariationalState", "apply_normalizer", "cross_validate", "elbo", "fit",
    "fit_normalizer", "generate_synthetic", "grid_search", "grid_values", "init_state", "invert_normalizer",
    "load_csv", "mae_report", "mask_fold", "missingness_stats", "predict_mean", "predict_with_variance",
    "render_heatmap_svg", "split_folds", "sweep", "update_bias", "update_trait_vector", "write_csv",
]
