from .core import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    getitem,
    grad_enabled,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
from .losses import NonFiniteLoss, binary_cross_entropy, check_finite, cross_entropy, smooth_l1
from .optim import ParamStore, adam_step, rmsprop_step, sgd_step
from .spatial import batchnorm2d, bilinear_sample, conv2d, interp_matrix, maxpool2x2, resize_bilinear, roi_crop

__all__ = [name for name in dir() if not name.startswith("_")]
