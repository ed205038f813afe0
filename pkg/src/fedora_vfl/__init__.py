"""Primal-dual unlearning for vertically split neural networks."""
from .estimators import (FedORAUnlearner, GradientAscentUnlearner, MembershipInferenceAttack,
                         RetrainUnlearner, VFLClassifier)
from .exceptions import (AlignmentError, ConfigError, DimensionError, DivergenceError, FedoraError,
                         IngestionError, NumericError, ValidationError)
from .fedora import UnlearnConfig, fedora_unlearn, unlearning_loss
from .runner import MetricsReport, export_metrics, run_experiment
from .vfl import PartySpec, SplitModel, VerticalDataset, build_split_model, vfl_train

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "ConfigError", "DimensionError", "DivergenceError", "FedoraError", "IngestionError",
    "NumericError", "ValidationError", "FedORAUnlearner", "GradientAscentUnlearner", "MembershipInferenceAttack",
    "RetrainUnlearner", "VFLClassifier", "UnlearnConfig", "fedora_unlearn", "unlearning_loss", "MetricsReport",
    "export_metrics", "run_experiment", "PartySpec", "SplitModel", "VerticalDataset", "build_split_model",
    "vfl_train",
]
