"""Minimal dense tensor engine with reverse-mode autodiff."""

from .core import (
    DimensionError,
    NonFiniteError,
    OpTrace,
    Tape,
    Tensor,
    backward,
    current_tape,
    get_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    precision_name,
    reset_tape,
    set_precision,
    trace,
)
from .ops import (
    add,
    as_tensor,
    batch_norm,
    concat,
    depthwise_conv3x3,
    div,
    exp,
    gelu,
    getitem,
    l2_normalize,
    l2_normalize_cols,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    soft_cross_entropy,
    softmax,
    softmax_rows,
    sqrt,
    sub,
    sum,
    swapaxes,
    tanh,
    transpose,
)
