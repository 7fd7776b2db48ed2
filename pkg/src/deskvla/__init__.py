"""Desk-scale embodied-policy kernels with a verifiable autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tensor, finite_diff_check
from .rng import Rng

__all__ = ["Tensor", "Rng", "finite_diff_check", "__version__"]
