"""Minimal dense-tensor engine with reverse-mode autodiff."""

from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    Tape,
    Tensor,
    abs_,
    add,
    avgpool2,
    channel_unit_norm,
    concat_channels,
    logistic,
    mean_all,
    mul,
    relu,
    scale,
    slice_channels,
    square,
    sub,
    sum_all,
    tanh,
    upsample_bilinear2,
)
from .gradcheck import grad_check
from .kernels import (
    DeformConvParams,
    bilinear_sample,
    conv2d,
    convlstm_cell,
    modulated_deform_conv2d,
)

__all__ = [
    "DeformConvParams",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "avgpool2",
    "bilinear_sample",
    "channel_unit_norm",
    "concat_channels",
    "conv2d",
    "convlstm_cell",
    "grad_check",
    "load_checkpoint",
    "logistic",
    "mean_all",
    "modulated_deform_conv2d",
    "mul",
    "relu",
    "save_checkpoint",
    "scale",
    "slice_channels",
    "square",
    "sub",
    "sum_all",
    "tanh",
    "upsample_bilinear2",
]
