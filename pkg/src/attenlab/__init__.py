"""Attention CNN classifier built on a small numpy autodiff engine."""

from .errors import (
    AttenlabError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
)
from .model import ModelConfig, StageSpec, build, forward, load_checkpoint, predict, preset, save_checkpoint
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

__all__ = [
    "AttenlabError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "InputError",
    "NumericError",
    "ModelConfig",
    "StageSpec",
    "Tensor",
    "TrainConfig",
    "build",
    "forward",
    "load_checkpoint",
    "no_grad",
    "predict",
    "preset",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
