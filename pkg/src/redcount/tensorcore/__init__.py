"""Minimal reverse-mode differentiation engine for the counting network."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BatchNormParams,
    batchnorm2d,
    concat_channels,
    conv2d,
    l1_loss,
    leaky_relu,
    stride_slice,
    tsum,
    weighted_sum,
)
from .optim import AdamState, adam_step, glorot_init
from .tensor import Tape, Tensor

__all__ = [
    "AdamState",
    "BatchNormParams",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "adam_step",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "glorot_init",
    "grad_check",
    "l1_loss",
    "leaky_relu",
    "stride_slice",
    "tsum",
    "weighted_sum",
]
