"""Age-period models for the gap in death counts between two populations.

Three estimators are provided: a double Poisson model (two independent
log-link Poisson fits), a bivariate Poisson model with a shared common
component, and a Skellam model fitted directly to the signed gap. Fitted
period effects are projected with a bivariate random walk with drift and
scored with error metrics, information criteria and the Diebold-Mariano
test.
"""

__version__ = "0.1.0"

from .design import AgePeriodParams
from .evaluation import DmResult, EvalReport, dm_by_age_group, dm_test, error_metrics, information_criteria
from .fit import FitResult, Model, OptimSettings, fit_bivariate_poisson, fit_double_poisson, fit_model, fit_skellam
from .forecast import ForecastResult, RwdModel, extract_period_series, fit_rwd, forecast_gap, forecast_period
from .kernels import BACKEND
from .panel import GapPanel, MortalityPanel, load_panel, subset, to_gap
from .sim import SimSpec, simulate_panel

__all__ = [
    "AgePeriodParams",
    "BACKEND",
    "DmResult",
    "EvalReport",
    "FitResult",
    "ForecastResult",
    "GapPanel",
    "Model",
    "MortalityPanel",
    "OptimSettings",
    "RwdModel",
    "SimSpec",
    "dm_by_age_group",
    "dm_test",
    "error_metrics",
    "extract_period_series",
    "fit_bivariate_poisson",
    "fit_double_poisson",
    "fit_model",
    "fit_rwd",
    "fit_skellam",
    "forecast_gap",
    "forecast_period",
    "information_criteria",
    "load_panel",
    "simulate_panel",
    "subset",
    "to_gap",
]
