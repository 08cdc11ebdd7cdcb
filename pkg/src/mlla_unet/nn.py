"""Parameter containers and the basic learned layers."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import ConvSpec
from .rng import trunc_normal
from .tensor import Tensor, resolve_dtype

INIT_STD = 0.02


def parameter(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


class Module:
    """Anything holding parameters.

    Parameters are discovered by walking attributes in definition order:
    tensors that require a gradient, child modules, and lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def registry(self) -> Dict[str, Tensor]:
        reg: Dict[str, Tensor] = {}
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter {name} is registered twice")
            seen.add(id(p))
            reg[name] = p
        return reg

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.registry().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        reg = self.registry()
        missing = set(reg) - set(state)
        extra = set(state) - set(reg)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in reg.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))

    def to(self, precision) -> "Module":
        dt = resolve_dtype(precision)
        for p in self.parameters():
            p.data = p.data.astype(dt)
        return self

    def zero_(self, predicate=lambda name: True) -> "Module":
        for name, p in self.named_parameters():
            if predicate(name):
                p.data[...] = 0
        return self


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (cin, cout), INIT_STD))
        self.bias = parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def macs(self, tokens: int) -> int:
        cin, cout = self.weight.shape
        return tokens * cin * cout


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, groups=1, bias=True):
        self.spec = ConvSpec(k, stride, k // 2 if padding is None else padding, groups)
        self.weight = parameter(trunc_normal(rng, (cout, cin // groups, k, k), INIT_STD))
        self.bias = parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)

    def out_hw(self, h: int, w: int) -> Tuple[int, int]:
        return self.spec.out_extent(h), self.spec.out_extent(w)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.out_hw(h, w)
        cout, cg, k, _ = self.weight.shape
        return ho * wo * cout * cg * k * k


class DepthwiseTransposedConv2d(Module):
    """Depthwise 3x3 stride-2 transposed convolution (exact 2x upsampling)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.spec = ConvSpec(3, 2, 1, channels)
        self.weight = parameter(trunc_normal(rng, (channels, 1, 3, 3), INIT_STD))
        self.bias = parameter(np.zeros(channels, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.bias, self.spec, output_padding=1)

    def macs(self, h: int, w: int) -> int:
        return h * w * self.weight.shape[0] * 9


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.weight = parameter(np.ones(channels, np.float32))
        self.bias = parameter(np.zeros(channels, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


def to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """[B, H*W, C] token sequence (row-major raster) to [B, C, H, W]."""
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sequence of {n} positions cannot be laid out as a {h}x{w} grid")
    return x.reshape(b, h, w, c).transpose(0, 3, 1, 2)


def from_grid(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
