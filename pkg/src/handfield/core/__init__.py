"""Minimal numpy tensor library with tape-based reverse-mode differentiation."""

from .encoding import EncodingConfig, positional_encode
from .gradcheck import grad_check
from .optim import AdamConfig, AdamState, ParamStore, adam_step
from .tensor import DimensionError, Tape, Tensor

__all__ = [
    "AdamConfig", "AdamState", "DimensionError", "EncodingConfig", "ParamStore", "Tape", "Tensor",
    "adam_step", "grad_check", "positional_encode",
]
