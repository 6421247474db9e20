"""Doubly robust transfer regression for covariates missing from a target sample."""

__version__ = "0.1.0"

from .data import CsvSchema, FeatureMap, Study, center_study, expand_features, load_study, write_study
from .density_ratio import DensityRatioEstimator, RatioFit, evaluate_weights, fit_density_ratio
from .estimators import EstimateOptions, EstimateResult, TransferRegression, estimate, estimate_many
from .imputation import GaussianImputer, ImputationFit, fit_gaussian_imputation, m1, m2
from .inference import BootstrapConfig, BootstrapResult, bootstrap, bootstrap_many, stratified_resample

__all__ = [
    "CsvSchema",
    "FeatureMap",
    "Study",
    "center_study",
    "expand_features",
    "load_study",
    "write_study",
    "DensityRatioEstimator",
    "RatioFit",
    "evaluate_weights",
    "fit_density_ratio",
    "EstimateOptions",
    "EstimateResult",
    "TransferRegression",
    "estimate",
    "estimate_many",
    "GaussianImputer",
    "ImputationFit",
    "fit_gaussian_imputation",
    "m1",
    "m2",
    "BootstrapConfig",
    "BootstrapResult",
    "bootstrap",
    "bootstrap_many",
    "stratified_resample",
]
