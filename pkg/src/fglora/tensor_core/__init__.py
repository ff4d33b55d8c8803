"""Numerical substrate: float64 tensors, reverse-mode autodiff, 3-D conv ops, losses, Adam."""

from .losses import bce_with_logits, dice_bce_loss, dice_term, mse_loss
from .ops import (
    add,
    concat_channels,
    conv1x1,
    conv3d,
    div,
    downsample_stride2,
    dropout,
    global_avg_pool,
    linear,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    upsample_nearest2x,
)
from .ops import sum as tsum
from .optim import AdamState, MissingGradientError, adam_step
from .tensor import GraphError, ShapeError, Tensor, as_tensor, no_grad

__all__ = [
    "AdamState",
    "GraphError",
    "MissingGradientError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "bce_with_logits",
    "concat_channels",
    "conv1x1",
    "conv3d",
    "dice_bce_loss",
    "dice_term",
    "div",
    "downsample_stride2",
    "dropout",
    "global_avg_pool",
    "linear",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "square",
    "sub",
    "tsum",
    "upsample_nearest2x",
]
