"""Minimal reverse-mode autodiff, optimizer and schedule."""
from mimae.autodiff.gradcheck import GradCheckReport, directional_check, grad_check
from mimae.autodiff.optim import LrSchedule, OptimizerState, adamw_step, cosine_lr, zero_grads
from mimae.autodiff.tensor import (
    Tensor,
    activation,
    as_tensor,
    broadcast_to,
    concat,
    finite_checks,
    gather_rows,
    getitem,
    is_grad_enabled,
    layer_norm,
    logsumexp,
    matmul,
    mean,
    no_grad,
    reshape,
    scatter_rows,
    softmax,
    stack,
    swapaxes,
    transpose,
    where_const,
)
from mimae.autodiff.tensor import exp, log, sqrt
from mimae.autodiff.tensor import tsum as sum_  # noqa: F401

__all__ = [
    "GradCheckReport", "LrSchedule", "OptimizerState", "Tensor", "activation", "adamw_step",
    "as_tensor", "broadcast_to", "concat", "cosine_lr", "directional_check", "exp", "finite_checks",
    "gather_rows", "getitem", "grad_check", "is_grad_enabled", "layer_norm", "log", "logsumexp",
    "matmul", "mean", "no_grad", "reshape", "scatter_rows", "softmax", "sqrt", "stack", "swapaxes",
    "transpose", "where_const", "zero_grads",
]
