"""Resolution changes between stages and the segmentation head."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import INIT_STD, Conv2d, DepthwiseTransposedConv2d, LayerNorm, Linear, Module, from_grid, to_grid
from .rng import trunc_normal
from .tensor import Tensor

PATCH = 4


class Edsm(Module):
    """Downsampling: 1x1 conv (C -> 2C), depthwise 3x3 stride-2 conv, 1x1 conv."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.expand = Conv2d(dim, 2 * dim, 1, rng)
        self.dw = Conv2d(2 * dim, 2 * dim, 3, rng, stride=2, padding=1, groups=2 * dim)
        self.mix = Conv2d(2 * dim, 2 * dim, 1, rng)

    def __call__(self, x: Tensor, h: int, w: int) -> Tuple[Tensor, int, int]:
        if h % 2 or w % 2:
            raise ShapeError(f"downsampling needs even extents, got {h}x{w}")
        g = self.mix(self.dw(self.expand(to_grid(x, h, w))))
        return from_grid(g), h // 2, w // 2

    def macs(self, h: int, w: int) -> int:
        return self.expand.macs(h, w) + self.dw.macs(h, w) + self.mix.macs(h // 2, w // 2)


class Eusm(Module):
    """Upsampling: 1x1 conv, depthwise 3x3 stride-2 transposed conv, 1x1 conv (C -> C/2), LN."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ShapeError(f"upsampling halves channels, got odd C={dim}")
        self.pre = Conv2d(dim, dim, 1, rng)
        self.up = DepthwiseTransposedConv2d(dim, rng)
        self.reduce = Conv2d(dim, dim // 2, 1, rng)
        self.norm = LayerNorm(dim // 2)

    def __call__(self, y: Tensor, h: int, w: int) -> Tuple[Tensor, int, int]:
        if y.shape[-1] % 2:
            raise ShapeError(f"upsampling halves channels, got odd C={y.shape[-1]}")
        g = self.reduce(self.up(self.pre(to_grid(y, h, w))))
        return self.norm(from_grid(g)), 2 * h, 2 * w

    def macs(self, h: int, w: int) -> int:
        return self.pre.macs(h, w) + self.up.macs(h, w) + self.reduce.macs(2 * h, 2 * w)


def regroup_patches(x: Tensor, h: int, w: int, p: int = PATCH) -> Tensor:
    """[B, h*w, p*p*C] -> [B, (h*p)*(w*p), C]; channel index is (row, col, c) within the patch."""
    b, n, pc = x.shape
    if n != h * w or pc % (p * p):
        raise ShapeError(f"cannot regroup {x.shape} into {p}x{p} patches on a {h}x{w} grid")
    c = pc // (p * p)
    g = x.reshape(b, h, w, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(b, h * p * w * p, c)


def ungroup_patches(x: Tensor, h: int, w: int, p: int = PATCH) -> Tensor:
    """Inverse of :func:`regroup_patches`; ``h, w`` are the coarse extents."""
    b, n, c = x.shape
    if n != h * p * w * p:
        raise ShapeError(f"sequence of {n} positions is not a {h * p}x{w * p} grid")
    g = x.reshape(b, h, p, w, p, c).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(b, h * w, p * p * c)


class FinalPatchExpand(Module):
    """4x upsampling per axis: Linear C -> 16C, then each position becomes a 4x4 patch.

    The projection starts as 16 tiled identities plus small noise, so at
    init the expansion is close to nearest-neighbour replication.
    """

    def __init__(self, dim: int, rng: np.random.Generator, patch: int = PATCH):
        self.patch = patch
        self.proj = Linear(dim, patch * patch * dim, rng)
        tiled = np.tile(np.eye(dim, dtype=np.float32), (1, patch * patch))
        self.proj.weight.data = tiled + trunc_normal(rng, tiled.shape, INIT_STD)

    def __call__(self, x: Tensor, h: int, w: int) -> Tuple[Tensor, int, int]:
        p = self.patch
        return regroup_patches(self.proj(x), h, w, p), h * p, w * p

    def macs(self, h: int, w: int) -> int:
        return self.proj.macs(h * w)


class PredictHead(Module):
    """1x1 conv to per-pixel class logits, returned as [B, classes, H, W]."""

    def __init__(self, dim: int, classes: int, rng: np.random.Generator):
        if classes < 2:
            raise ConfigError(f"need at least 2 classes, got {classes}")
        self.classes = classes
        self.conv = Conv2d(dim, classes, 1, rng)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        return self.conv(to_grid(x, h, w))

    def macs(self, h: int, w: int) -> int:
        return self.conv.macs(h, w)


def predict_labels(logits) -> np.ndarray:
    """Argmax over the class axis: integer masks in ``[0, classes)``."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-3).astype(np.int64)
