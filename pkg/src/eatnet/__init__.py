"""Differentiable numpy implementation of a pyramid EAT-block vision
transformer (MSRA + GLI + MD-MSA) with a training and verification CLI."""

from .tensor import Tensor, NumericError, set_precision

__all__ = ["Tensor", "NumericError", "set_precision"]
__version__ = "0.1.0"
