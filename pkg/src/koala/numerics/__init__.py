"""Differentiable numpy primitives, gradient checking and optimisation."""
from .functional import (
    add, affine, attention, concat, cross_attention, div, exp, gelu, getitem,
    layer_norm, log, log_softmax, matmul, mean, mul, nll_rows, reshape,
    softmax_rows, stack, sub, sum, swapaxes, take_rows, tanh, broadcast_to,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import OptimState, adamw_step, lr_at
from .params import ParamStore, checksum_array
from .tensor import Tensor, as_tensor, backward, check_finite, no_grad, precision

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad", "precision", "check_finite",
    "add", "sub", "mul", "div", "matmul", "exp", "log", "tanh", "gelu", "sum", "mean",
    "reshape", "swapaxes", "getitem", "take_rows", "concat", "stack", "broadcast_to",
    "softmax_rows", "log_softmax", "layer_norm", "affine", "attention",
    "cross_attention", "nll_rows",
    "grad_check", "GradCheckReport", "OptimState", "adamw_step", "lr_at",
    "ParamStore", "checksum_array",
]
