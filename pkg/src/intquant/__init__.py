"""Quantization-aware training with noise injection and learned clamps,
plus an integer-only inference path with dyadic rescaling."""

from intquant.quantizer import QuantSpec, ClampParams
from intquant.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["QuantSpec", "ClampParams", "Tensor", "__version__"]
