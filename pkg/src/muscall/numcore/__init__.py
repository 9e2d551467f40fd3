"""Dense tensors with reverse-mode gradients, on top of numpy."""

from . import ops
from .gradcheck import NonDeterministicFunctionError, finite_difference_check
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module, Parameter
from .tensor import (
    NumericOverflowError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Conv2d",
    "Embedding",
    "LayerNorm",
    "Linear",
    "Module",
    "NonDeterministicFunctionError",
    "NumericOverflowError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "default_dtype",
    "finite_difference_check",
    "get_default_dtype",
    "no_grad",
    "ops",
    "set_default_dtype",
]
