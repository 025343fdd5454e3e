"""Minimal reverse-mode differentiation over float64 numpy arrays."""
from . import ops
from .ops import BatchNormState, batchnorm_1d, softmax_temperature
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor

__all__ = [
    "AdamState",
    "BatchNormState",
    "Tape",
    "Tensor",
    "adam_step",
    "batchnorm_1d",
    "ops",
    "softmax_temperature",
]
