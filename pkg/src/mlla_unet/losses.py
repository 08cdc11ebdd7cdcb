"""Segmentation training losses on per-pixel class logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ValidationError
from .tensor import Tensor

LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.4     # cross-entropy weight
    beta: float = 0.6      # Dice weight
    smooth: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if self.smooth < 0:
            raise ConfigError(f"Dice smooth must be non-negative, got {self.smooth}")


def _prepare(logits, gt):
    """Batch the inputs to [B, C, H, W] logits and [B, H, W] labels; validate the labels."""
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    labels = np.asarray(getattr(gt, "labels", gt))
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
    if labels.ndim == 2:
        labels = labels[None]
    if logits.ndim != 4 or labels.ndim != 3:
        raise ValidationError(f"expected logits [B, C, H, W] and labels [B, H, W], got {logits.shape}, {labels.shape}")
    b, c, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ValidationError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"label values must lie in [0, {c}), found [{labels.min()}, {labels.max()}]")
    return logits, labels


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    """[B, H, W] integer labels to [B, C, H, W]."""
    return (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(dtype)


def cross_entropy(logits, gt) -> Tensor:
    """Mean over pixels of ``-log p(true class)``, with ``log p`` floored at ``log(1e-12)``."""
    logits, labels = _prepare(logits, gt)
    onehot = one_hot(labels, logits.shape[1], logits.dtype)
    logp = ops.clamp_min(ops.log_softmax(logits, axis=1), LOG_FLOOR)
    picked = ops.sum(ops.mul(logp, onehot), axis=1)
    return ops.neg(ops.mean(picked))


def dice_loss(logits, gt, smooth: float = 1.0) -> Tensor:
    """``1 - mean_c (2 sum p_c y_c + s) / (sum y_c^2 + sum p_c^2 + s)``.

    Sums run over every pixel of every image in the batch; ``p`` are softmax
    probabilities and ``y`` the one-hot ground truth.
    """
    logits, labels = _prepare(logits, gt)
    c = logits.shape[1]
    y = one_hot(labels, c, logits.dtype)
    p = ops.softmax(logits, axis=1)
    axes = (0, 2, 3)
    inter = ops.sum(ops.mul(p, y), axis=axes)
    den = ops.add(ops.sum(ops.mul(p, p), axis=axes), (y * y).sum(axis=axes))
    dice = ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(den, smooth))
    return ops.sub(1.0, ops.mean(dice))


def loss_terms(logits, gt, cfg: LossConfig = LossConfig()):
    """(total, ce, dice) with ``total = alpha * ce + beta * dice``."""
    ce = cross_entropy(logits, gt)
    dice = dice_loss(logits, gt, cfg.smooth)
    total = ops.add(ops.mul(ce, cfg.alpha), ops.mul(dice, cfg.beta))
    return total, ce, dice


def total_loss(logits, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    # a zero weight skips its term entirely, so (1, 0) and (0, 1) are exact projections
    if cfg.beta == 0:
        return ops.mul(cross_entropy(logits, gt), cfg.alpha)
    if cfg.alpha == 0:
        return ops.mul(dice_loss(logits, gt, cfg.smooth), cfg.beta)
    return loss_terms(logits, gt, cfg)[0]
