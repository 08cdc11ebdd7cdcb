"""Positional encodings that stand in for Mamba's forget gate.

LePE and CPE are depthwise-convolution branches on the spatial grid; RoPE
rotates query/key feature pairs by position-dependent angles.  The combined
encoding is

    PE(x) = CPE_1(x) + Attn(RoPE(Q), RoPE(K), V + LePE(V)) + CPE_2(x)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np

from . import ops
from .attention import AttentionParams, feature_map_phi, linear_attention_global, merge_heads, split_heads
from .errors import ConfigError
from .nn import Conv2d, Linear, Module, from_grid, to_grid
from .tensor import Tensor

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = ROPE_BASE

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dim, got {self.head_dim}")

    @property
    def thetas(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def rope(x, positions: Sequence[int], p: Optional[RopeParams] = None) -> Tensor:
    """Rotate pair ``(x[2i], x[2i+1])`` at position ``m`` by ``m * theta_i``.

    ``x`` is ``[..., N, d]`` and ``positions`` has length N.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"RoPE needs an even last axis, got {d}")
    p = p or RopeParams(d)
    if p.head_dim != d:
        raise ConfigError(f"RoPE params built for d={p.head_dim}, input has d={d}")
    ang = np.outer(np.asarray(positions, dtype=np.float64), p.thetas)
    return ops.rotate_pairs(x, np.cos(ang), np.sin(ang))


@lru_cache(maxsize=64)
def _axial_tables(h: int, w: int, d: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    pairs = d // 2
    row_pairs = pairs - pairs // 2
    col_pairs = pairs // 2
    rows, cols = np.divmod(np.arange(h * w), w)
    parts = []
    for count, coord in ((row_pairs, rows), (col_pairs, cols)):
        if count:
            theta = base ** (-np.arange(count, dtype=np.float64) / count)
            parts.append(np.outer(coord, theta))
    ang = np.concatenate(parts, axis=1)
    return np.cos(ang), np.sin(ang)


def rope_2d(x, h: int, w: int, base: float = ROPE_BASE) -> Tensor:
    """Axial RoPE on a row-major ``h x w`` token grid.

    The first half of the pairs is rotated by the row index, the second half
    by the column index, each half with its own geometric angle ladder.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"RoPE needs an even head dim, got {d}")
    if x.shape[-2] != h * w:
        raise ConfigError(f"sequence length {x.shape[-2]} is not {h}x{w}")
    cos, sin = _axial_tables(h, w, d, float(base))
    return ops.rotate_pairs(x, cos, sin)


def depthwise_conv3(channels: int, rng: np.random.Generator) -> Conv2d:
    return Conv2d(channels, channels, 3, rng, groups=channels)


class LePE(Module):
    """``v + DWConv3x3(v) W_L`` on the token grid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = depthwise_conv3(channels, rng)
        self.proj = Linear(channels, channels, rng, bias=False)

    def __call__(self, v: Tensor, h: int, w: int) -> Tensor:
        branch = from_grid(self.conv(to_grid(v, h, w)))
        return ops.add(v, self.proj(branch))

    def macs(self, h: int, w: int) -> int:
        return self.conv.macs(h, w) + self.proj.macs(h * w)


class CPE(Module):
    """``x + DWConv3x3(x)`` on the token grid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = depthwise_conv3(channels, rng)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        return ops.add(x, from_grid(self.conv(to_grid(x, h, w))))

    def macs(self, h: int, w: int) -> int:
        return self.conv.macs(h, w)


class PeWeights(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.lepe = LePE(channels, rng)
        self.cpe1 = CPE(channels, rng)
        self.cpe2 = CPE(channels, rng)


def positional_compose(
    x: Tensor,
    pe: PeWeights,
    attn: AttentionParams,
    h: int,
    w: int,
    value_source: Optional[Tensor] = None,
    rope_base: float = ROPE_BASE,
) -> Tensor:
    """``CPE_1(x) + Attn(RoPE(Q), RoPE(K), V + LePE(V)) + CPE_2(x)`` for ``x`` of shape [B, H*W, C].

    ``Q = phi(x W_Q)``, ``K = phi(x W_K)`` and ``V = s W_V`` with ``s`` the
    value source (``x`` unless given).  Rotated features feed the numerator;
    the denominator keeps the unrotated positive features.
    """
    heads = attn.heads
    src = x if value_source is None else value_source
    q = feature_map_phi(attn.q(x))
    k = feature_map_phi(attn.k(x))
    v = attn.v(src)
    v = ops.add(v, pe.lepe(v, h, w))
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    y = linear_attention_global(rope_2d(qh, h, w, rope_base), rope_2d(kh, h, w, rope_base), vh, q_den=qh, k_den=kh)
    return ops.add(ops.add(pe.cpe1(x, h, w), merge_heads(y)), pe.cpe2(x, h, w))
