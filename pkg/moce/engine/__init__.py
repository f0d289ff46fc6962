"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from .tensor import Tensor, ComputationTape, backward
from .optim import Adam
from . import ops

__all__ = ["Tensor", "ComputationTape", "backward", "ops", "Adam"]
