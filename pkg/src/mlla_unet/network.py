"""U-shaped segmentation network: stem, encoder, bottleneck, decoder, head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from . import ops
from .blocks import MLP_RATIO, MllaBlock, Stem
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .rng import default_seed, split
from .sampling import Edsm, Eusm, FinalPatchExpand, PredictHead
from .tensor import Tensor, as_tensor, count_macs, no_grad

PRESETS = ("tiny", "small", "base", "toy")
SKIP_MODES = ("add", "concat")


@dataclass
class ModelConfig:
    name: str
    dims: List[int]
    heads: List[int]
    depths: List[int]
    input_size: int = 224
    in_channels: int = 1
    classes: int = 14
    skip: str = "add"
    mlp_ratio: int = MLP_RATIO

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        self.heads = [int(h) for h in self.heads]
        self.depths = [int(d) for d in self.depths]
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.dims)

    @property
    def embed_dim(self) -> int:
        return self.dims[0]

    @property
    def downsample(self) -> int:
        """Total stride between the input image and the coarsest stage."""
        return 4 * 2 ** (self.stages - 1)

    def validate(self) -> None:
        n = len(self.dims)
        if n < 1:
            raise ConfigError("dims: need at least one stage")
        if len(self.heads) != n or len(self.depths) != n:
            raise ConfigError(f"dims, heads and depths must all have {n} entries "
                              f"(got {len(self.heads)} heads, {len(self.depths)} depths)")
        c0 = self.dims[0]
        for i, (d, h, k) in enumerate(zip(self.dims, self.heads, self.depths)):
            if d != c0 * 2 ** i:
                raise ConfigError(f"dims[{i}]={d}, expected {c0} * 2^{i} = {c0 * 2 ** i}")
            if h < 1 or d % h:
                raise ConfigError(f"heads[{i}]={h} does not divide dims[{i}]={d}")
            if (d // h) % 2:
                raise ConfigError(f"dims[{i}]/heads[{i}] = {d // h} must be even for rotary encoding")
            if k < 0:
                raise ConfigError(f"depths[{i}]={k} is negative")
        if c0 % 2:
            raise ConfigError(f"dims[0]={c0} must be even")
        if self.classes < 2:
            raise ConfigError(f"classes={self.classes} must be at least 2")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels={self.in_channels} must be positive")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"skip={self.skip!r}, expected one of {SKIP_MODES}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio={self.mlp_ratio} must be positive")
        if self.input_size % self.downsample:
            raise ConfigError(f"input_size={self.input_size} is not divisible by {self.downsample}")

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        missing = sorted(k for k in ("name", "dims", "heads", "depths") if k not in data)
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def load_config(source: Union[str, Path]) -> ModelConfig:
    """A preset name (tiny, small, base, toy) or a path to a YAML file."""
    text = None
    if str(source) in PRESETS:
        text = resources.files("mlla_unet").joinpath("presets").joinpath(f"{source}.yaml").read_text()
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config {source!r} is neither a preset {PRESETS} nor a readable file")
        text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {source!r} is not valid YAML: {exc}") from exc
    return ModelConfig.from_dict(data)


class Stage(Module):
    def __init__(self, dim: int, heads: int, depth: int, rng: np.random.Generator, mlp_ratio: int):
        self.blocks = [MllaBlock(dim, heads, rng, mlp_ratio) for _ in range(depth)]

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        for blk in self.blocks:
            x = blk(x, h, w)
        return x

    def macs(self, h: int, w: int, matmul_only: bool = False) -> int:
        return sum(b.macs(h, w, matmul_only) for b in self.blocks)


@dataclass
class Trace:
    """Token tensors seen during one forward pass."""

    encoder: List[Tensor] = field(default_factory=list)
    decoder_input: List[Tensor] = field(default_factory=list)
    decoder: List[Tensor] = field(default_factory=list)

    def shapes(self) -> List[Tuple[int, int]]:
        """(positions, channels) of every stage output, encoder then decoder."""
        return [tuple(t.shape[1:]) for t in self.encoder + self.decoder]


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        L = config.stages
        streams = iter(split(seed, 4 * L + 4))
        self.stem = Stem(config.in_channels, config.embed_dim, next(streams))
        self.encoder = [Stage(d, h, k, next(streams), config.mlp_ratio)
                        for d, h, k in zip(config.dims, config.heads, config.depths)]
        self.downs = [Edsm(config.dims[i], next(streams)) for i in range(L - 1)]
        # decoder lists run from the coarsest skip level upward
        self.ups = [Eusm(config.dims[i + 1], next(streams)) for i in reversed(range(L - 1))]
        self.decoder = [Stage(config.dims[i], config.heads[i], config.depths[i], next(streams), config.mlp_ratio)
                        for i in reversed(range(L - 1))]
        if config.skip == "concat":
            self.fuse = [Linear(2 * config.dims[i], config.dims[i], next(streams)) for i in reversed(range(L - 1))]
        else:
            self.fuse = []
        self.expand = FinalPatchExpand(config.embed_dim, next(streams))
        self.head = PredictHead(config.embed_dim, config.classes, next(streams))

    def check_input(self, shape) -> None:
        c = self.config
        if len(shape) != 4:
            raise ShapeError(f"expected an image batch [N, {c.in_channels}, H, W], got shape {tuple(shape)}")
        if shape[1] != c.in_channels:
            raise ShapeError(f"expected {c.in_channels} input channels, got {shape[1]}")
        h, w = shape[2:]
        if h % c.downsample or w % c.downsample:
            raise ShapeError(f"input {h}x{w}: H and W must be divisible by {c.downsample} "
                             f"(4x stem and {c.stages - 1} halvings)")

    def __call__(self, image, trace: Optional[Trace] = None) -> Tensor:
        image = image if isinstance(image, Tensor) else as_tensor(image, self.stem.conv1.weight.dtype)
        self.check_input(image.shape)
        x, h, w = self.stem(image)
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x, h, w)
            if trace is not None:
                trace.encoder.append(x)
            if i < len(self.downs):
                skips.append((x, h, w))
                x, h, w = self.downs[i](x, h, w)
        for j, (up, stage) in enumerate(zip(self.ups, self.decoder)):
            x, h, w = up(x, h, w)
            skip, sh, sw = skips[-1 - j]
            if (sh, sw) != (h, w):
                raise ShapeError(f"skip at {sh}x{sw} does not match upsampled {h}x{w}")
            if self.fuse:
                x = self.fuse[j](ops.concat([x, skip], axis=-1))
            else:
                x = ops.add(x, skip)
            if trace is not None:
                trace.decoder_input.append(x)
            x = stage(x, h, w)
            if trace is not None:
                trace.decoder.append(x)
        x, h, w = self.expand(x, h, w)
        return self.head(x, h, w)

    forward = __call__


def build_model(config: Union[ModelConfig, str], seed: Optional[int] = None) -> Model:
    if not isinstance(config, ModelConfig):
        config = load_config(config)
    return Model(config, default_seed(seed))


def count_params(model: Module) -> int:
    return sum(p.size for p in model.registry().values())


@dataclass
class FlopReport:
    macs: int
    breakdown: Dict[str, int]

    @property
    def flops(self) -> int:
        """One multiply-add counted as two floating-point operations."""
        return 2 * self.macs


def count_flops(model: Model, input_hw: Optional[Tuple[int, int]] = None, matmul_only: bool = False) -> FlopReport:
    """Multiply-add count of one forward pass for a single image.

    Dense and convolution layers contribute their multiply-adds; attention
    contributes ``attention_flops`` per head (or only its matrix-product part
    when ``matmul_only``).  Normalization and activations are not counted.

    Extents follow the padded stride-2 convolutions, so the counter can be
    evaluated at sizes the forward pass would reject (e.g. 112 with a
    stride-32 network); decoder stages take the extent of their skip.
    """
    c = model.config
    h, w = input_hw or (c.input_size, c.input_size)
    if min(h, w) < 1:
        raise ShapeError(f"input extent must be positive, got {h}x{w}")
    parts: Dict[str, int] = {"stem": model.stem.macs(h, w)}
    h, w = model.stem.conv1.out_hw(h, w)
    h, w = model.stem.conv3.out_hw(h, w)
    extents = []
    for i, stage in enumerate(model.encoder):
        parts[f"encoder{i + 1}"] = stage.macs(h, w, matmul_only)
        if i < len(model.downs):
            extents.append((h, w))
            parts[f"down{i + 1}"] = model.downs[i].macs(h, w)
            h, w = model.downs[i].dw.out_hw(h, w)
    for j, (up, stage) in enumerate(zip(model.ups, model.decoder)):
        level = len(model.ups) - j
        fh, fw = extents[-1 - j]
        parts[f"up{level}"] = up.pre.macs(h, w) + up.up.macs(h, w) + up.reduce.macs(fh, fw)
        h, w = fh, fw
        if model.fuse:
            parts[f"fuse{level}"] = model.fuse[j].macs(h * w)
        parts[f"decoder{level}"] = stage.macs(h, w, matmul_only)
    parts["expand"] = model.expand.macs(h, w)
    h, w = 4 * h, 4 * w
    parts["head"] = model.head.macs(h, w)
    return FlopReport(sum(parts.values()), parts)


def traced_macs(model: Model, input_hw: Optional[Tuple[int, int]] = None) -> int:
    """Multiply-adds recorded by the matmul/conv ops during an actual forward pass."""
    c = model.config
    h, w = input_hw or (c.input_size, c.input_size)
    image = np.zeros((1, c.in_channels, h, w), dtype=model.stem.conv1.weight.dtype)
    with no_grad(), count_macs() as counter:
        model(image)
    return counter[0]
