"""Minimal differentiable tensor kernels used by the segmentation engine."""

from .gradcheck import grad_check
from .layers import (
    Affine,
    BatchNorm2d,
    BilinearUpsample,
    Conv2d,
    MaxPool2d,
    ReLU,
    conv_out_size,
    crop_to,
    pad_to_multiple,
)
from .loss import CrossEntropyOut, softmax, softmax_cross_entropy
from .optim import sgd_step
from .params import DTYPE, ConfigError, GradientError, Param, uniform_init, zero_grads

__all__ = [
    "Affine",
    "BatchNorm2d",
    "BilinearUpsample",
    "Conv2d",
    "CrossEntropyOut",
    "ConfigError",
    "DTYPE",
    "GradientError",
    "MaxPool2d",
    "Param",
    "ReLU",
    "conv_out_size",
    "crop_to",
    "grad_check",
    "pad_to_multiple",
    "softmax",
    "softmax_cross_entropy",
    "sgd_step",
    "uniform_init",
    "zero_grads",
]
