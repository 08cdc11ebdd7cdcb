"""Synthetic shapes segmentation data and the training-time augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ValidationError
from .rng import split
from .stf import read_stf, write_stf

MAX_TRIES = 200
MANIFEST = "dataset.json"


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 64
    size: int = 64
    classes: int = 3
    contrast: float = 0.5    # minimum gap between a shape's mean intensity and the background
    noise: float = 0.15      # per-pixel Gaussian noise std

    def validate(self) -> None:
        if self.size < 32 or self.size % 32:
            raise ValidationError(f"size must be a positive multiple of 32, got {self.size}")
        if self.classes < 2:
            raise ValidationError(f"classes must be at least 2, got {self.classes}")
        if self.count < 1:
            raise ValidationError(f"count must be positive, got {self.count}")
        if self.contrast <= 0 or self.noise < 0:
            raise ValidationError("contrast must be positive and noise non-negative")


def _shape_mask(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    # largest half-extent shrinks once more than two shapes share the image
    lo = size / 10.0
    hi = max(lo, size / 4.0 * min(1.0, np.sqrt(2.0 / (classes - 1))))
    a, b = rng.uniform(lo, hi, 2)
    r0, c0 = rng.uniform(hi * 0.6, size - hi * 0.6, 2)
    if rng.random() < 0.5:
        t = rng.uniform(0, np.pi)
        u = (rr - r0) * np.cos(t) + (cc - c0) * np.sin(t)
        v = -(rr - r0) * np.sin(t) + (cc - c0) * np.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (np.abs(rr - r0) <= a) & (np.abs(cc - c0) <= b)


def make_sample(rng: np.random.Generator, spec: SynthSpec) -> Tuple[np.ndarray, np.ndarray]:
    """One (image [1, S, S] float32, labels [S, S] uint16) pair.

    Class k >= 1 is a filled ellipse or rectangle with mean intensity
    ``contrast * (k + 0.25 + 0.5 u)``, u ~ U(0, 1); shapes never touch.
    """
    s = spec.size
    labels = np.zeros((s, s), np.uint16)
    occupied = np.zeros((s, s), bool)
    means = np.zeros(spec.classes)
    for k in range(1, spec.classes):
        for _ in range(MAX_TRIES):
            m = _shape_mask(rng, s, spec.classes)
            if m.sum() >= 16 and not (m & occupied).any():
                break
        else:
            raise GenerationError(f"could not place shape for class {k} in {MAX_TRIES} tries "
                                  f"(size {s}, {spec.classes} classes)")
        labels[m] = k
        occupied |= ndimage.binary_dilation(m, iterations=2)
        means[k] = spec.contrast * (k + 0.25 + 0.5 * rng.random())
    image = means[labels] + spec.noise * rng.standard_normal((s, s))
    return image[None].astype(np.float32), labels


def synth_dataset(spec: SynthSpec) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    spec.validate()
    for rng in split(spec.seed, spec.count):
        yield make_sample(rng, spec)


def write_dataset(out: Path, spec: SynthSpec) -> List[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (image, labels) in enumerate(synth_dataset(spec)):
        for kind, arr in (("image", image), ("mask", labels)):
            p = out / f"{kind}_{i:04d}.stf"
            write_stf(p, arr)
            written.append(p)
    (out / MANIFEST).write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return written


def load_dataset(path: Path) -> Tuple[SynthSpec, np.ndarray, np.ndarray]:
    """Images [N, 1, S, S] float32 and labels [N, S, S] int64."""
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise ValidationError(f"{path} has no {MANIFEST}; generate data with gen-data first")
    spec = SynthSpec(**json.loads(manifest.read_text()))
    images, masks = [], []
    for i in range(spec.count):
        images.append(read_stf(path / f"image_{i:04d}.stf"))
        masks.append(read_stf(path / f"mask_{i:04d}.stf").astype(np.int64))
    return spec, np.stack(images), np.stack(masks)


def augment(rng: np.random.Generator, image: np.ndarray, labels: np.ndarray,
            scale: Tuple[float, float] = (0.9, 1.1), degrees: float = 15.0):
    """Random isotropic scaling and rotation about the image centre.

    Images are resampled linearly, labels by nearest neighbour.
    """
    s = rng.uniform(*scale)
    t = np.deg2rad(rng.uniform(-degrees, degrees))
    # output -> input coordinate map
    mat = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) / s
    h, w = labels.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - mat @ centre
    img = np.stack([ndimage.affine_transform(ch, mat, offset, order=1, mode="nearest") for ch in image])
    lab = ndimage.affine_transform(labels, mat, offset, order=0, mode="nearest")
    return img.astype(image.dtype), lab.astype(labels.dtype)
