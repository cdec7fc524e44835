"""Uncertainty-aware dynamic-threshold pseudo-label selection for long-tailed semi-supervised learning."""

from .config import RunConfig, parse_config
from .data import ClassProfile, DatasetSpec, SemiDataset, class_counts, generate_synthetic, load_dataset, save_dataset
from .errors import (
    CapabilityError, ConfigError, DomainError, FormatError, NumericError, ShapeError, StateError, UdtsError,
)
from .losses import LossConfig
from .nn import SgdConfig
from .selector import GateConfig, select_batch
from .thresholds import ThresholdState, derive_thresholds, init_state, update_state
from .trainer import TrainConfig, evaluate, load_checkpoint, run, save_checkpoint, train
from .uncertainty import McConfig, mc_estimate, predictive_entropy

__version__ = "0.1.0"

__all__ = [
    "CapabilityError", "ClassProfile", "ConfigError", "DatasetSpec", "DomainError", "FormatError",
    "GateConfig", "LossConfig", "McConfig", "NumericError", "RunConfig", "SemiDataset", "SgdConfig",
    "ShapeError", "StateError", "ThresholdState", "TrainConfig", "UdtsError", "class_counts",
    "derive_thresholds", "evaluate", "generate_synthetic", "init_state", "load_checkpoint",
    "load_dataset", "mc_estimate", "parse_config", "predictive_entropy", "run", "save_checkpoint",
    "save_dataset", "select_batch", "train", "update_state",
]
