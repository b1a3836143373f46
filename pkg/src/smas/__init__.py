"""Semi-Markov multi-state capture-recapture-recovery models via state-aggregate expansion."""
from .dwell import Geometric, ShiftedNegBinomial, ShiftedPoisson, TabulatedPMF
from .inference import Aggregation, FitOptions, FitResult, ParameterMap, fit, model_select
from .likelihood import Dataset, EncounterHistory, joint_loglik
from .simulate import StudyDesign, run_study, simulate_dataset
from .statespace import AggregationPlan, ModelParams, build_aggregation

__version__ = "0.1.0"

__all__ = [
    "Aggregation", "AggregationPlan", "Dataset", "EncounterHistory", "FitOptions", "FitResult",
    "Geometric", "ModelParams", "ParameterMap", "ShiftedNegBinomial", "ShiftedPoisson",
    "StudyDesign", "TabulatedPMF", "build_aggregation", "fit", "joint_loglik", "model_select",
    "run_study", "simulate_dataset",
]
