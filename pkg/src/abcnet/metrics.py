"""Pixel-level segmentation metrics (IoU, nIoU, F1) and ROC sweeps.

Conventions:
  * empty prediction and empty ground truth count as a perfect match (IoU = F1 = 1);
  * binarisation is ``prob >= threshold``;
  * ROC detection probability is target-level (8-connected ground-truth
    components hit by at least one predicted pixel), false-alarm rate is
    pixel-level (false-positive pixels over all pixels).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.5
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    total: int = 0

    @property
    def t(self) -> int:
        """Ground-truth positives."""
        return self.tp + self.fn

    @property
    def p(self) -> int:
        """Predicted positives."""
        return self.tp + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.total + other.total)


@dataclass
class MetricsReport:
    n: int
    iou: float
    niou: float
    f1: float
    per_sample_iou: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [("N", self.n), ("IoU", self.iou), ("nIoU", self.niou), ("F1", self.f1)]


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    pd: float
    fa: float


def _as_binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be a binary mask with values in {{0, 1}}")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(gt.size))


def iou(c: ConfusionCounts) -> float:
    denom = c.t + c.p - c.tp
    return 1.0 if denom == 0 else c.tp / denom


def niou(samples: Sequence[ConfusionCounts]) -> float:
    if len(samples) == 0:
        raise ValueError("nIoU needs at least one sample")
    return float(np.mean([iou(c) for c in samples]))


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def total_counts(samples: Iterable[ConfusionCounts]) -> ConfusionCounts:
    out = ConfusionCounts(0, 0, 0, 0)
    for c in samples:
        out = out + c
    return out


def binarize(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def evaluate(probs, gts, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Metrics over a set of probability maps; IoU and F1 use summed counts, nIoU the per-sample mean."""
    samples = [confusion(binarize(p, threshold), g) for p, g in zip(probs, gts)]
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    agg = total_counts(samples)
    per_sample = [iou(c) for c in samples]
    return MetricsReport(n=len(samples), iou=iou(agg), niou=float(np.mean(per_sample)),
                         f1=f1(agg), per_sample_iou=per_sample)


def _components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    return labels, count


def roc_sweep(probs, gts, thresholds: Sequence[float]) -> list[RocPoint]:
    """Pd / Fa pairs for each threshold over a set of 2-D probability maps."""
    probs = [np.asarray(p, dtype=np.float64).reshape(np.shape(g)[-2:]) for p, g in zip(probs, gts)]
    gts = [_as_binary(g, "gt").reshape(np.shape(g)[-2:]) for g in gts]
    if any(((p < 0) | (p > 1)).any() for p in probs):
        raise ValueError("probabilities must lie in [0, 1]")
    labelled = [_components(g) for g in gts]
    n_targets = sum(n for _, n in labelled)
    n_pixels = sum(g.size for g in gts)

    points = []
    for thr in thresholds:
        hit = 0
        false_pixels = 0
        for prob, gt, (labels, n) in zip(probs, gts, labelled):
            pred = prob >= thr
            false_pixels += int(np.count_nonzero(pred & ~gt))
            if n:
                hit += len(np.unique(labels[pred & gt]))
        pd = 1.0 if n_targets == 0 else hit / n_targets
        points.append(RocPoint(float(thr), pd, false_pixels / n_pixels))
    return points


def format_report(report: MetricsReport) -> str:
    return "\n".join(f"{name},{value}" for name, value in report.rows())


def format_roc(points: Sequence[RocPoint]) -> str:
    return "\n".join(f"{p.threshold:.6f},{p.pd:.6f},{p.fa:.8f}" for p in points)
