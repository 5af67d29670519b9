"""
fpvt_tensor - dense tensors with tape-based reverse-mode autodiff on numpy.

The engine provides the arithmetic substrate for the face pyramid vision
transformer: differentiable convolution, pooling, normalization and attention
primitives, the AdamW and SGD optimizers, and a finite-difference gradient
oracle.
"""

from .exceptions import (
    DataError,
    Error,
    GradCheckError,
    GradientError,
    NumericalError,
    ShapeError,
    Warning,
)
from .gradcheck import (
    DEFAULT_TOLERANCE,
    GradCheckCase,
    GradCheckResult,
    assert_gradients,
    check_gradients,
    numerical_gradient,
    op_cases,
)
from .optim import OPTIMIZERS, SGD, AdamW, Optimizer, OptimizerState
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    current_tape,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    pad,
    set_default_dtype,
    stack,
    where,
)

__version__ = "0.1.0"

__all__ = [
    # Core
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "concat",
    "stack",
    "where",
    "clip",
    "pad",
    "current_tape",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    # Optimizers
    "Optimizer",
    "OptimizerState",
    "AdamW",
    "SGD",
    "OPTIMIZERS",
    # Gradient checking
    "GradCheckCase",
    "GradCheckResult",
    "check_gradients",
    "assert_gradients",
    "numerical_gradient",
    "op_cases",
    "DEFAULT_TOLERANCE",
    # Exceptions
    "Warning",
    "Error",
    "ShapeError",
    "DataError",
    "NumericalError",
    "GradientError",
    "GradCheckError",
]
