"""Thresholded multiple-outcome (TMO) standard errors for regressions on spatial units.

Pairs of units whose residuals co-move across many auxiliary outcomes keep
their covariance term in the sandwich; all other cross-unit terms are zeroed.
"""
from .correlation import PairCorrelations, load_pairs, normalize_residuals, pairwise_correlations, save_pairs
from .dataset_io import (CleaningPolicy, RegressionDataset, Schema, dataset_from_arrays, load_dataset,
                         save_dataset, standardize_outcomes)
from .errors import DataError, NumericalError, TMOError
from .null_threshold import (NullModel, ThresholdChoice, choose_threshold, estimate_null_binned,
                             estimate_null_iqr, fixed_threshold)
from .pipeline import TMOConfig, TMOResult, run_tmo
from .regression import ResidualPanel, fit, fit_iv_second_stage, fit_ols, fit_wls
from .simulation import (CalibratedSigma, ProportionalDGP, SimResult, calibrate_sigma, draw_errors,
                         generate_proportional, run_horserace)
from .variance import (KeepSet, MethodConfig, VarianceReport, build_keep_set, cluster_variance,
                       compare_methods, distance_kernel_variance, hc_variance, sandwich_variance)

__version__ = "0.1.0"
