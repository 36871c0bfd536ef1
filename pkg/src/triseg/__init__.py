"""Desk-scale text-driven 3D segmentation with state-space scans and rational
group activations, built on an in-package numpy autodiff core."""

from .tensor import Tensor, no_grad, set_default_dtype, default_dtype

__all__ = ["Tensor", "no_grad", "set_default_dtype", "default_dtype"]

__version__ = "0.1.0"
