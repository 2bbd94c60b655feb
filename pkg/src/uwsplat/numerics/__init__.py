"""Dense float32 tensors with tape-based reverse-mode differentiation."""

from .autodiff import (
    DEFAULT_DTYPE,
    Gradients,
    Tape,
    Tensor,
    absolute,
    active_tape,
    add,
    as_tensor,
    avg_pool2,
    backward,
    bilinear_sample,
    clamp,
    concat,
    depthwise_conv3x3,
    depthwise_separable_conv,
    div,
    exp,
    gather,
    getitem,
    global_avg_pool,
    log,
    matmul,
    mean,
    mul,
    neg,
    pointwise_conv,
    power,
    relu,
    reshape,
    scatter_add,
    segment_cumsum_exclusive,
    sigmoid,
    softplus,
    sqrt,
    stack,
    sub,
    swap_last,
    tanh,
    transpose,
    tsum,
)
from .gradcheck import grad_check

__all__ = [name for name in dir() if not name.startswith("_")]
