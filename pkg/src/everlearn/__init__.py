"""Class-incremental learning with uncertainty and attention distillation,
built on a small deterministic float64 autodiff core."""

from .rng import Rng
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "Rng", "__version__"]
