"""Numerical core: tensors, the autodiff tape, and the Adam optimizer."""

from ssl_echo.tensor_core.autodiff import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    batchnorm2d,
    clamp_min,
    conv2d,
    get_default_dtype,
    log,
    log_softmax,
    matmul,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    stop_recording,
    tensor_mean,
    tensor_sum,
)
from ssl_echo.tensor_core.optim import AdamState, DivergenceError, adam_step, init_adam

__all__ = [
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "batchnorm2d",
    "clamp_min",
    "conv2d",
    "get_default_dtype",
    "log",
    "log_softmax",
    "matmul",
    "relu",
    "reshape",
    "set_default_dtype",
    "softmax",
    "stop_recording",
    "tensor_mean",
    "tensor_sum",
    "AdamState",
    "DivergenceError",
    "adam_step",
    "init_adam",
]
