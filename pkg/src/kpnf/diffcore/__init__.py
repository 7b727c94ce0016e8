"""Reverse-mode autodiff over shape-carrying numpy arrays.

Substrate for every trainable component: encoders, fusion and radiance
MLPs, volume-rendering quadrature, and the training loop. 64-bit mode is
used for testing and gradient checks, 32-bit for training.
"""

from kpnf.diffcore.checkpoint import FORMAT_VERSION, MAGIC, load_tensors, save_tensors
from kpnf.diffcore.gradcheck import GradCheckReport, grad_check
from kpnf.diffcore.node import (
    DiffNode,
    as_node,
    backward,
    constant,
    grad_enabled,
    no_grad,
    parameter,
    zero_grad,
)
from kpnf.diffcore.ops import (
    absolute,
    add,
    bilinear_sample,
    broadcast,
    clip_max,
    concat,
    conv2d,
    cumsum,
    divide,
    elu,
    exp,
    gaussian_kernel,
    group_norm,
    matmul,
    mean_reduce,
    multiply,
    negate,
    relu,
    reshape,
    softmax,
    softplus,
    subtract,
    sum_reduce,
    transposed_conv2d,
    variance_reduce,
)

__all__ = [
    "DiffNode",
    "GradCheckReport",
    "FORMAT_VERSION",
    "MAGIC",
    "absolute",
    "add",
    "as_node",
    "backward",
    "bilinear_sample",
    "broadcast",
    "clip_max",
    "concat",
    "constant",
    "conv2d",
    "cumsum",
    "divide",
    "elu",
    "exp",
    "gaussian_kernel",
    "grad_check",
    "grad_enabled",
    "group_norm",
    "load_tensors",
    "matmul",
    "mean_reduce",
    "multiply",
    "negate",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "save_tensors",
    "softmax",
    "softplus",
    "subtract",
    "sum_reduce",
    "transposed_conv2d",
    "variance_reduce",
    "zero_grad",
]
