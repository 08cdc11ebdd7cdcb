"""Per-class DSC / HD95 evaluation of a model on a labelled set."""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .metrics import LabelMask, dsc, hd95
from .network import Model
from .sampling import predict_labels
from .tensor import no_grad


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def score_masks(preds: np.ndarray, gts: np.ndarray, classes: int, spacing=(1.0, 1.0)) -> Dict:
    """Metrics for predicted vs ground-truth label stacks [N, H, W], foreground classes only.

    HD95 is ``None`` when the class is missing from either mask.  Two
    aggregation orders are reported: average over classes within each case
    then over cases, and average over cases within each class then over
    classes.
    """
    if preds.shape != gts.shape:
        raise ValidationError(f"prediction stack {preds.shape} does not match ground truth {gts.shape}")
    fg = list(range(1, classes))
    cases: List[Dict] = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        pm, gm = LabelMask(p, spacing), LabelMask(g, spacing)
        per = {}
        for c in fg:
            try:
                h = hd95(pm, gm, c)
            except UndefinedMetricError:
                h = None
            per[str(c)] = {"dsc": dsc(pm, gm, c), "hd95": h}
        cases.append({"index": i, "classes": per})

    per_class = {}
    for c in fg:
        key = str(c)
        d = [case["classes"][key]["dsc"] for case in cases]
        h = [case["classes"][key]["hd95"] for case in cases]
        per_class[key] = {"dsc": _mean(d), "hd95": _mean(h), "hd95_undefined": sum(v is None for v in h)}

    case_means = [{"dsc": _mean(v["dsc"] for v in case["classes"].values()),
                   "hd95": _mean(v["hd95"] for v in case["classes"].values())} for case in cases]
    aggregate = {
        "classes_then_cases": {"dsc": _mean(m["dsc"] for m in case_means),
                               "hd95": _mean(m["hd95"] for m in case_means)},
        "cases_then_classes": {"dsc": _mean(v["dsc"] for v in per_class.values()),
                               "hd95": _mean(v["hd95"] for v in per_class.values())},
    }
    all_dsc = [v["dsc"] for case in cases for v in case["classes"].values()]
    return {
        "count": len(cases),
        "classes": classes,
        "cases": cases,
        "per_class": per_class,
        "aggregate": aggregate,
        "mean_foreground_dsc": _mean(all_dsc),
    }


def predict(model: Model, images: np.ndarray, batch: int = 8) -> np.ndarray:
    out = []
    dtype = model.stem.conv1.weight.dtype
    with no_grad():
        for start in range(0, len(images), batch):
            out.append(predict_labels(model(images[start:start + batch].astype(dtype))))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.int64)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, classes: Optional[int] = None) -> Dict:
    c = model.config
    if images.ndim != 4 or images.shape[1] != c.in_channels:
        raise ValidationError(f"images {images.shape} do not match the model's {c.in_channels} input channels")
    h, w = images.shape[2:]
    if h % c.downsample or w % c.downsample:
        raise ValidationError(f"images are {h}x{w}; this model needs extents divisible by {c.downsample}")
    if labels.shape != (images.shape[0], h, w):
        raise ValidationError(f"labels {labels.shape} do not match images {images.shape}")
    classes = classes or c.classes
    if labels.size and labels.max() >= c.classes:
        raise ValidationError(f"labels reach {labels.max()}, model predicts only {c.classes} classes")
    return score_masks(predict(model, images), labels, classes)


def rounded(obj, digits: int = 6):
    """Copy of a report with every float rounded, so text and JSON show the same numbers."""
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [rounded(v, digits) for v in obj]
    return obj


def format_report(report: Dict) -> str:
    """Aligned text for a (rounded) report; numbers are printed exactly as stored."""
    def f(v, width):
        return ("undefined" if v is None else repr(v)).rjust(width)

    lines = [f"cases: {report['count']}", f"{'class':>5}  {'DSC':>10}  {'HD95 (mm)':>10}  {'HD95 undefined':>14}"]
    for c, v in report["per_class"].items():
        lines.append(f"{c:>5}  {f(v['dsc'], 10)}  {f(v['hd95'], 10)}  {v['hd95_undefined']:>14d}")
    for name, agg in report["aggregate"].items():
        lines.append(f"mean ({name.replace('_', ' ')}): DSC {f(agg['dsc'], 0)}, HD95 {f(agg['hd95'], 0)}")
    lines.append(f"mean foreground DSC: {f(report['mean_foreground_dsc'], 0)}")
    return "\n".join(lines)
