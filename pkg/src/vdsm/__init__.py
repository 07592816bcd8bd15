"""Mixture-of-primitives survival regression with variational clustering front-ends."""
from .distributions import PrimitiveFamily, PrimitiveParams
from .dsm import MixtureModel, TrainConfig
from .errors import (
    ConfigError,
    IngestionError,
    InvalidInputError,
    TrainingDivergenceError,
    UndefinedMetricError,
)
from .experiment import ExperimentConfig, SurvivalModel

__version__ = "0.1.0"
