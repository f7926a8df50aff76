"""Deterministic dense-tensor micro-kernel with analytic gradients."""

from .ops import (
    BatchNormState,
    affine,
    affine_backward,
    batchnorm2d,
    batchnorm2d_backward,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d,
    conv2d_backward,
    conv_output_size,
    conv_transpose2d,
    conv_transpose2d_backward,
    gaussian_blur,
    gaussian_kernel1d,
    gelu,
    gelu_backward,
    im2col,
    log_softmax_channel,
    relu,
    relu_backward,
    softmax_channel,
    softmax_channel_backward,
)
from .optim import Adam, AdamState, ParamTensor, adam_step, lr_at
from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .tensorio import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from . import layers
