"""Nuisance-trait surrogates from process data for reducing differential item functioning."""

__version__ = "0.1.0"

from .exceptions import (
    ConditionNotMetError,
    ConfigError,
    DataError,
    DegenerateGeometryError,
    NumericalError,
    ProcDifError,
    RankDeficientError,
)
from .model_core import GlmFit, ItemDataset, LinkKind, NuisanceScores, fit_glm, wald_test
from .pipeline import (
    AssessmentData,
    DIFCorrector,
    PipelineConfig,
    residual_nuisance,
    run_correction,
    run_detection,
)
from .simulation import EvalReport, SimConfig, generate_replication, run_study
from .surrogate import (
    NuisanceSurrogate,
    SurrogateResult,
    closed_form_omega,
    fit_surrogate,
    numeric_omega,
    objective_L,
    residualize,
)
from .traits import (
    ItemBank,
    ItemParams,
    OneFactorScorer,
    TraitEstimates,
    TwoPLCalibrator,
    initial_theta_2pl,
    initial_theta_linear,
    update_theta,
)

__all__ = [
    "AssessmentData",
    "ConditionNotMetError",
    "ConfigError",
    "DIFCorrector",
    "DataError",
    "DegenerateGeometryError",
    "EvalReport",
    "GlmFit",
    "ItemBank",
    "ItemDataset",
    "ItemParams",
    "LinkKind",
    "NuisanceScores",
    "NuisanceSurrogate",
    "NumericalError",
    "OneFactorScorer",
    "PipelineConfig",
    "ProcDifError",
    "RankDeficientError",
    "SimConfig",
    "SurrogateResult",
    "TraitEstimates",
    "TwoPLCalibrator",
    "closed_form_omega",
    "fit_glm",
    "fit_surrogate",
    "generate_replication",
    "initial_theta_2pl",
    "initial_theta_linear",
    "numeric_omega",
    "objective_L",
    "residual_nuisance",
    "residualize",
    "run_correction",
    "run_detection",
    "run_study",
    "update_theta",
    "wald_test",
]
