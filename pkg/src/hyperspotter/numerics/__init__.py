"""Minimal tensor engine: reverse-mode autodiff plus Adam."""

from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NumericalError,
    ShapeError,
    Tensor,
    UsageError,
    add,
    clip,
    concat,
    conv1d,
    custom_op,
    default_dtype,
    depthwise_conv1d,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    layernorm,
    linear,
    log,
    log_softmax,
    lstm_step,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    same_padding,
    sigmoid,
    softmax,
    stack,
    sub,
    swish,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
