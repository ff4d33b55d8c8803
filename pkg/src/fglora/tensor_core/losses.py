from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor, make_node


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Evaluated as ``max(z, 0) - z*t + log1p(exp(-|z|))`` so large logits stay finite.
    """
    z, t = as_tensor(logits), as_tensor(target)
    if z.shape != t.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs target {t.shape}")
    zd, td = z.data, t.data
    n = zd.size
    val = np.mean(np.maximum(zd, 0.0) - zd * td + np.log1p(np.exp(-np.abs(zd))))

    def backward(g):
        return (g * (ops._sigmoid(zd) - td) / n, None)

    return make_node(np.array(val), (z, t), backward)


def dice_term(logits, target, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss ``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`` on ``p = sigmoid(z)``."""
    probs = ops.sigmoid(logits)
    t = as_tensor(target)
    inter = ops.sum(ops.mul(probs, t))
    denom = ops.sum(probs) + float(t.data.sum()) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def _check_binary(target: Tensor) -> None:
    d = target.data
    if not np.all((d == 0.0) | (d == 1.0)):
        raise ValueError("target mask must contain only 0 and 1")


def dice_bce_loss(logits, target_mask, smooth: float = 1.0, return_terms: bool = False):
    logits, target = as_tensor(logits), as_tensor(target_mask)
    if logits.shape != target.shape:
        raise ShapeError(f"dice_bce_loss: logits {logits.shape} vs target {target.shape}")
    if smooth <= 0:
        raise ValueError("smooth must be positive")
    _check_binary(target)
    d = dice_term(logits, target, smooth)
    b = bce_with_logits(logits, target)
    total = d + b
    if return_terms:
        return total, d, b
    return total


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    return ops.mean(ops.square(ops.sub(pred, target)))
