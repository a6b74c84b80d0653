"""Debiased autoregressive models for staggered policy adoption in panels."""

from .bias import (
    MomentInputs,
    bias_bound,
    classical_bias,
    general_bias,
    moments_from_samples,
    projection_decompose,
    proposition1_bound,
    variance_diagnostic,
)
from .comparators import ComparatorResult, did_gt, synth, twfe
from .errors import DamError, DataError, NumericalError
from .estimands import (
    EstimandRequest,
    EstimandResult,
    adopter_cells,
    multiplicative_ratio,
    sapo_grid,
    satt,
    satt_by_period,
)
from .estimation import (
    FreqFit,
    PosteriorFit,
    SamplerConfig,
    fit_bayes,
    fit_ipw,
    fit_mle,
    plugin_effect,
)
from .model import DamParams, ModelSpec, TreatmentPath
from .panel import PanelDataset, dichotomize, lag_frame, load_csv, write_csv
from .sim import (
    BaselineConfig,
    EstimatorConfig,
    MetricsReport,
    SimScenario,
    assign_treatment,
    apply_effects,
    generate_dam_panel,
    standard_grid,
    run_grid,
    synthetic_baseline,
)

__all__ = [
    "adopter_cells",
    "apply_effects",
    "assign_treatment",
    "BaselineConfig",
    "bias_bound",
    "classical_bias",
    "ComparatorResult",
    "DamError",
    "DamParams",
    "DataError",
    "dichotomize",
    "did_gt",
    "EstimandRequest",
    "EstimandResult",
    "EstimatorConfig",
    "fit_bayes",
    "fit_ipw",
    "fit_mle",
    "FreqFit",
    "general_bias",
    "generate_dam_panel",
    "lag_frame",
    "load_csv",
    "MetricsReport",
    "ModelSpec",
    "MomentInputs",
    "moments_from_samples",
    "multiplicative_ratio",
    "NumericalError",
    "PanelDataset",
    "plugin_effect",
    "PosteriorFit",
    "projection_decompose",
    "proposition1_bound",
    "run_grid",
    "SamplerConfig",
    "sapo_grid",
    "satt",
    "satt_by_period",
    "SimScenario",
    "standard_grid",
    "synth",
    "synthetic_baseline",
    "TreatmentPath",
    "twfe",
    "variance_diagnostic",
    "write_csv",
]
