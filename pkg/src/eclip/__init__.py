"""Catalog-aware contrastive pretraining for paired product text and images."""

from .batching import BatchSampler, CategoryIndex, ScheduleConfig, batch_size_schedule
from .encoders import EncoderSpec, ModelParams, load_checkpoint, save_checkpoint
from .errors import (
    CapacityError,
    ConfigError,
    DegenerateError,
    DimensionError,
    EClipError,
    NumericError,
    ParameterError,
    RangeError,
)
from .loss import eclip_loss, soft_label_matrix
from .training import PairDataset, TrainConfig, multistream_step, naive_step, train

__version__ = "0.1.0"

__all__ = [
    "BatchSampler",
    "CapacityError",
    "CategoryIndex",
    "ConfigError",
    "DegenerateError",
    "DimensionError",
    "EClipError",
    "EncoderSpec",
    "ModelParams",
    "NumericError",
    "PairDataset",
    "ParameterError",
    "RangeError",
    "ScheduleConfig",
    "TrainConfig",
    "batch_size_schedule",
    "eclip_loss",
    "load_checkpoint",
    "multistream_step",
    "naive_step",
    "save_checkpoint",
    "soft_label_matrix",
    "train",
]
