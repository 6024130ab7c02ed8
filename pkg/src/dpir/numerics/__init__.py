"""Float32 tensor core: tape autodiff, the op set, and Adam."""

from .tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    chunk,
    concat,
    conv2d,
    div,
    exp,
    full,
    layer_norm,
    log,
    matmul,
    mean_,
    mul,
    narrow,
    neg,
    ones,
    pow_scalar,
    randn,
    relu,
    reshape,
    scaled_dot_attention,
    sigmoid,
    silu,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
    upsample_nearest,
    zeros,
)
from .optim import AdamState, adam_step, collect_grads, zero_grads

__all__ = [
    "Tape", "Tensor", "absolute", "add", "as_tensor", "backward", "chunk",
    "concat", "conv2d", "div", "exp", "full", "layer_norm", "log", "matmul",
    "mean_", "mul", "narrow", "neg", "ones", "pow_scalar", "randn", "relu",
    "reshape", "scaled_dot_attention", "sigmoid", "silu", "softmax", "sqrt",
    "sub", "sum_", "transpose", "upsample_nearest", "zeros",
    "AdamState", "adam_step", "collect_grads", "zero_grads",
]
