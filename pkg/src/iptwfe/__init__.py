"""IPTW with propensity-score fixed effects for marginal structural models on panels."""

from importlib import resources

from .errors import ConfigError, EstimationError, IptwFeError
from .msm import (
    HistoryTerm,
    MsmFit,
    MsmSpec,
    fit_iptw_fe_pipeline,
    fit_iptw_pipeline,
    fit_msm_wls,
    hc0_variance,
    hc2_variance,
    sandwich_variance,
    simple_estimator,
    wls,
)
from .panel_data import (
    DesignMatrix,
    LagSpec,
    PanelDataset,
    PanelSchema,
    build_design,
    load_panel_csv,
    validate,
    write_panel_csv,
)
from .ps_model import PsFit, PsSpec, fit_fixed_effects_mle, fit_marginal_model, fit_pooled_mle, predict_propensity
from .sim import SimConfig, SimResult, generate_panel, run_study
from .weights import Trimming, WeightSet, WeightSpec, apply_trimming, balance_check, compute_weights

__version__ = "0.1.0"


def example_data_path():
    """Path to the bundled simulated panel.

    Generated by ``generate_panel(SimConfig(n=200, rho=20, a=2, master_seed=2024), rep=0)``
    and written with :func:`write_panel_csv`.
    """
    return resources.files(__package__) / "data" / "example_panel.csv"


__all__ = [
    "ConfigError", "EstimationError", "IptwFeError",
    "HistoryTerm", "MsmFit", "MsmSpec", "fit_iptw_fe_pipeline", "fit_iptw_pipeline", "fit_msm_wls",
    "hc0_variance", "hc2_variance", "sandwich_variance", "simple_estimator", "wls",
    "DesignMatrix", "LagSpec", "PanelDataset", "PanelSchema", "build_design", "load_panel_csv",
    "validate", "write_panel_csv",
    "PsFit", "PsSpec", "fit_fixed_effects_mle", "fit_marginal_model", "fit_pooled_mle", "predict_propensity",
    "SimConfig", "SimResult", "generate_panel", "run_study",
    "Trimming", "WeightSet", "WeightSpec", "apply_trimming", "balance_check", "compute_weights",
    "example_data_path",
]
