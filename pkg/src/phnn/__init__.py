"""Parameterized hypercomplex convolution and multiplication layers on a small numpy autodiff engine."""

from .algebra import AlgebraSpec, make_algebra, preset_algebra
from .layers import PHCConv, PHMLinear, from_standard_conv, param_count
from .models import ModelSpec, build_model
from .tensor import Tape, Tensor, backward, no_grad, tensor_create

__all__ = [
    "AlgebraSpec", "make_algebra", "preset_algebra",
    "PHCConv", "PHMLinear", "from_standard_conv", "param_count",
    "ModelSpec", "build_model",
    "Tape", "Tensor", "backward", "no_grad", "tensor_create",
]
__version__ = "0.1.0"
