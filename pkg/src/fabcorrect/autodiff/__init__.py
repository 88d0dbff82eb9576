"""Reverse-mode automatic differentiation over NCHW float tensors."""
from .gradcheck import GradCheckReport, ParamReport, grad_check, relative_error
from .ops import (
    accumulate_in,
    add,
    concat_channels,
    conv1x1,
    conv2d,
    maxpool2x2,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    sum_all,
    upsample2x,
    weighted_sum,
)
from .tensor import OpNode, Tensor, backward

__all__ = [
    "GradCheckReport",
    "OpNode",
    "ParamReport",
    "Tensor",
    "accumulate_in",
    "add",
    "backward",
    "concat_channels",
    "conv1x1",
    "conv2d",
    "grad_check",
    "maxpool2x2",
    "mean_all",
    "mul",
    "relative_error",
    "relu",
    "scale",
    "sigmoid",
    "sum_all",
    "upsample2x",
    "weighted_sum",
]
