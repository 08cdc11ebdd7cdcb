"""The MLLA token mixer, the residual block around it, and the convolutional stem."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from . import ops
from .attention import AttentionParams, attention_flops, attention_matmul_macs
from .errors import ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, from_grid, to_grid
from .posenc import ROPE_BASE, PeWeights, depthwise_conv3, positional_compose
from .tensor import Tensor

MLP_RATIO = 4


class MllaMixer(Module):
    """Gated linear-attention mixer.

    F1 = L(SiLU(DWConv3x3(x)))    gate branch
    F2 = L(x) * F1                 queries and keys come from F2
    F3 = L(x)                      the value projection of ``attn``
    out = L(PE(F2; values from F3))
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.gate_conv = depthwise_conv3(dim, rng)
        self.gate_proj = Linear(dim, dim, rng)
        self.in_proj = Linear(dim, dim, rng)
        self.attn = AttentionParams(dim, heads, rng)
        self.pe = PeWeights(dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def gate(self, x: Tensor, h: int, w: int) -> Tensor:
        return self.gate_proj(ops.silu(from_grid(self.gate_conv(to_grid(x, h, w)))))

    def __call__(self, x: Tensor, h: int, w: int, rope_base: float = ROPE_BASE) -> Tensor:
        f1 = self.gate(x, h, w)
        f2 = ops.mul(self.in_proj(x), f1)
        y = positional_compose(f2, self.pe, self.attn, h, w, value_source=x, rope_base=rope_base)
        return self.out_proj(y)

    def macs(self, h: int, w: int, matmul_only: bool = False) -> int:
        """Multiply-adds of dense and conv layers plus the attention counter.

        ``matmul_only`` counts only the attention work done as matrix products,
        which is what the runtime tracer sees.
        """
        n = h * w
        dense = (self.gate_proj.macs(n) + self.in_proj.macs(n) + self.out_proj.macs(n)
                 + self.attn.q.macs(n) + self.attn.k.macs(n) + self.attn.v.macs(n))
        convs = (self.gate_conv.macs(h, w) + self.pe.lepe.macs(h, w)
                 + self.pe.cpe1.macs(h, w) + self.pe.cpe2.macs(h, w))
        d = self.attn.head_dim
        attn = attention_matmul_macs(n, d, d) if matmul_only else attention_flops("linear", n, d, d)
        return dense + convs + self.attn.heads * attn


class Mlp(Module):
    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = MLP_RATIO):
        self.fc1 = Linear(dim, ratio * dim, rng)
        self.fc2 = Linear(ratio * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))

    def macs(self, tokens: int) -> int:
        return self.fc1.macs(tokens) + self.fc2.macs(tokens)


class MllaBlock(Module):
    """Pre-norm residual pair: ``z + Mixer(LN(z))`` then ``z + MLP(LN(z))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = MLP_RATIO):
        self.norm1 = LayerNorm(dim)
        self.mixer = MllaMixer(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng, mlp_ratio)

    def __call__(self, z: Tensor, h: int, w: int) -> Tensor:
        if z.ndim != 3 or z.shape[1] != h * w:
            raise ShapeError(f"block expects [B, {h * w}, C] tokens, got {z.shape}")
        z = ops.add(self.mixer(self.norm1(z), h, w), z)
        return ops.add(self.mlp(self.norm2(z)), z)

    def macs(self, h: int, w: int, matmul_only: bool = False) -> int:
        return self.mixer.macs(h, w, matmul_only) + self.mlp.macs(h * w)


class Stem(Module):
    """Image to stride-4 token embeddings.

    a = GELU(conv1(x)) at half resolution and C0/2 channels
    x0 = conv3(conv2(a) + a), with conv1's output computed once and reused
    """

    def __init__(self, in_channels: int, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ShapeError(f"stem width must be even, got {dim}")
        self.conv1 = Conv2d(in_channels, dim // 2, 3, rng, stride=2)
        self.conv2 = Conv2d(dim // 2, dim // 2, 3, rng)
        self.conv3 = Conv2d(dim // 2, dim, 3, rng, stride=2)

    def __call__(self, image: Tensor) -> Tuple[Tensor, int, int]:
        if image.ndim != 4:
            raise ShapeError(f"stem expects [B, C, H, W], got {image.shape}")
        h, w = image.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"stem needs spatial dims divisible by 4, got {h}x{w}")
        a = ops.gelu(self.conv1(image))
        x0 = self.conv3(ops.add(self.conv2(a), a))
        return from_grid(x0), h // 4, w // 4

    def macs(self, h: int, w: int) -> int:
        h2, w2 = self.conv1.out_hw(h, w)
        return self.conv1.macs(h, w) + self.conv2.macs(h2, w2) + self.conv3.macs(h2, w2)
