"""LOTUS: attention-based data lottery tickets and magnitude pruning for small vision transformers."""

from lotus.errors import (
    DimensionError,
    FormatError,
    InputError,
    LotusError,
    NumericError,
    UsageError,
)
from lotus.estimators import LotteryPatchSelector, MagnitudePruner, ViTClassifier
from lotus.vit import ViTConfig

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "FormatError",
    "InputError",
    "LotusError",
    "NumericError",
    "UsageError",
    "LotteryPatchSelector",
    "MagnitudePruner",
    "ViTClassifier",
    "ViTConfig",
]
