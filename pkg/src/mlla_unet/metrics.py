"""Overlap and boundary-distance metrics on integer label masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError, ValidationError


@dataclass
class LabelMask:
    labels: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)   # (row mm, col mm)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValidationError(f"label mask must be 2D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValidationError(f"label mask must hold integers, got {self.labels.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValidationError(f"spacing must be two positive numbers, got {self.spacing}")

    def region(self, c: int) -> np.ndarray:
        return self.labels == c


MaskLike = Union[LabelMask, np.ndarray]


def _pair(pred: MaskLike, gt: MaskLike) -> Tuple[LabelMask, LabelMask]:
    spacing = next((m.spacing for m in (pred, gt) if isinstance(m, LabelMask)), (1.0, 1.0))
    pred = pred if isinstance(pred, LabelMask) else LabelMask(pred, spacing)
    gt = gt if isinstance(gt, LabelMask) else LabelMask(gt, spacing)
    if pred.spacing != gt.spacing:
        raise ValidationError(f"mask spacings differ: {pred.spacing} vs {gt.spacing}")
    if pred.labels.shape != gt.labels.shape:
        raise ValidationError(f"mask shapes differ: {pred.labels.shape} vs {gt.labels.shape}")
    return pred, gt


def dsc(pred: MaskLike, gt: MaskLike, c: int) -> float:
    """``2|X & Y| / (|X| + |Y|)`` for the class-``c`` regions; 1.0 when both are empty."""
    pred, gt = _pair(pred, gt)
    x, y = pred.region(c), gt.region(c)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with a 4-neighbour outside the region or lying on the grid border."""
    padded = np.pad(region, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
    return region & ~interior[1:-1, 1:-1]


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every ``src`` boundary pixel to the nearest ``dst`` boundary pixel."""
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def boundary_distances(pred: MaskLike, gt: MaskLike, c: int):
    pred, gt = _pair(pred, gt)
    x, y = pred.region(c), gt.region(c)
    if not x.any() or not y.any():
        which = "prediction" if not x.any() else "ground truth"
        raise UndefinedMetricError(f"class {c} is absent from the {which}; boundary distance undefined")
    bx, by = boundary(x), boundary(y)
    return _directed(bx, by, pred.spacing), _directed(by, bx, pred.spacing)


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Smallest sample with at least ``q`` percent of samples at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, -(-int(round(q * 100)) * v.size // 10000))
    return float(v[rank - 1])


def hd95(pred: MaskLike, gt: MaskLike, c: int) -> float:
    """95th percentile (nearest rank) of the pooled directed boundary distances, in mm."""
    d_xy, d_yx = boundary_distances(pred, gt, c)
    return nearest_rank(np.concatenate([d_xy, d_yx]), 95)


def hd100(pred: MaskLike, gt: MaskLike, c: int) -> float:
    """Classical Hausdorff distance: the larger of the two directed maxima."""
    d_xy, d_yx = boundary_distances(pred, gt, c)
    return float(max(d_xy.max(), d_yx.max()))
