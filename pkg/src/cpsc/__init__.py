"""Conformal-prediction-guided self-calibration for imbalanced and noisy multimodal learning."""

from .conformal import ConformalState, calibrate, prediction_set, rank_reliability
from .errors import CalibrationError, ConfigError, CpscError, DimensionError, NumericError
from .model import CpscModel, ModelConfig
from .trainer import TrainConfig, fit, infer

__all__ = [
    "CalibrationError",
    "ConfigError",
    "ConformalState",
    "CpscError",
    "CpscModel",
    "DimensionError",
    "ModelConfig",
    "NumericError",
    "TrainConfig",
    "calibrate",
    "fit",
    "infer",
    "prediction_set",
    "rank_reliability",
]
