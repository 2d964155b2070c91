"""Minimal dense-tensor numerics with reverse-mode gradients."""
from . import ops
from .gradcheck import grad_check, relative_error
from .module import Module, parameter
from .ops import (
    attention,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    pool,
    relu,
    sigmoid,
    softmax,
    softplus,
)
from .tensor import (
    Tensor,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    topological_order,
)

__all__ = [
    "Module", "Tensor", "attention", "concat", "conv2d", "default_dtype", "gelu",
    "get_default_dtype", "grad_check", "layer_norm", "linear", "log_softmax", "matmul",
    "no_grad", "ops", "parameter", "pool", "relative_error", "relu", "set_default_dtype",
    "sigmoid", "softmax", "softplus", "topological_order",
]
