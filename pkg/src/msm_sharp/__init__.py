"""Sharp sensitivity bounds for inverse propensity weighting under the
marginal sensitivity model, via quantile balancing."""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, BootstrapInterval, percentile_bootstrap_ci
from .bounds import (
    BoundsEstimate,
    SensitivityModel,
    att_bound,
    balance_table,
    ipw_point_estimate,
    odds_calibration,
    qb_apo_bound,
    sensitivity_interval,
    tau_from_lambda,
    weight_box,
    zsb_bound,
)
from .data import Dataset, load_csv, standardize_covariates, validate_dataset, write_csv
from .errors import DataError, InfeasibleError, MSMError, NumericalError, SeparationError
from .oracle import (
    gaussian_apo_bounds,
    gaussian_ate_identified_set,
    vertex_bound_oracle,
    worst_case_propensity,
)
from .regression import crossfit_knn_quantiles, fit_linear_quantiles, fit_logistic, fit_weighted_qr
from .simulation import StudyConfig, generate_dgp, run_study

__all__ = [
    "BootstrapConfig", "BootstrapInterval", "BoundsEstimate", "DataError", "Dataset",
    "InfeasibleError", "MSMError", "NumericalError", "SensitivityModel", "SeparationError",
    "StudyConfig", "att_bound", "balance_table", "crossfit_knn_quantiles", "fit_linear_quantiles",
    "fit_logistic", "fit_weighted_qr", "gaussian_apo_bounds", "gaussian_ate_identified_set",
    "generate_dgp", "ipw_point_estimate", "load_csv", "odds_calibration", "percentile_bootstrap_ci",
    "qb_apo_bound", "run_study", "sensitivity_interval", "standardize_covariates", "tau_from_lambda",
    "validate_dataset", "vertex_bound_oracle", "weight_box", "worst_case_propensity", "write_csv",
    "zsb_bound",
]
