"""Class-average / pixel-average accuracy with map-label projection.

Pixels are excluded when the ground truth is void, depth is missing, or no
prediction exists. Classes without ground-truth pixels do not enter the
class average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import DimensionMismatch, NoData
from .label_fusion import nearest_source_index
from .prediction import VOID, ProbabilityMap, rescale_probability_map
from .surfel_map import SurfelMap, visible_set


@dataclass
class ConfusionAccumulator:
    classes: int
    counts: np.ndarray = None
    ignored: int = 0
    frames: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.classes, self.classes), dtype=np.int64)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(
            self.classes, self.counts + other.counts, self.ignored + other.ignored, self.frames + other.frames
        )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_accuracy(self) -> np.ndarray:
        """Recall per class; NaN for classes with no ground-truth pixels."""
        gt = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(gt > 0, np.diag(self.counts) / gt, np.nan)

    def to_dict(self, label_names=None) -> dict:
        per = self.per_class_accuracy()
        d = {
            "class_avg": class_average_accuracy(self) if self.total else None,
            "pixel_avg": pixel_average_accuracy(self) if self.total else None,
            "per_class": [None if np.isnan(a) else float(a) for a in per],
            "ignored_pixels": int(self.ignored),
            "counted_pixels": self.total,
            "frames_evaluated": int(self.frames),
            "void_convention": "gt void, missing depth and missing predictions are excluded from numerator and denominator",
        }
        if label_names is not None:
            d["classes"] = list(label_names)
        return d


def accumulate(acc: ConfusionAccumulator, predicted, gt, depth) -> ConfusionAccumulator:
    predicted, gt, depth = np.asarray(predicted), np.asarray(gt), np.asarray(depth)
    if not (predicted.shape == gt.shape == depth.shape):
        raise DimensionMismatch(f"shapes differ: pred {predicted.shape}, gt {gt.shape}, depth {depth.shape}")
    n = acc.classes
    keep = (gt != VOID) & (predicted != VOID) & (depth > 0) & np.isfinite(depth)
    keep &= (gt >= 0) & (gt < n) & (predicted >= 0) & (predicted < n)
    g = gt[keep].astype(np.int64)
    p = predicted[keep].astype(np.int64)
    counts = acc.counts + np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionAccumulator(n, counts, acc.ignored + int(keep.size - keep.sum()), acc.frames + 1)


def class_average_accuracy(acc: ConfusionAccumulator) -> float:
    if acc.total == 0:
        raise NoData("no counted pixels")
    return float(np.nanmean(acc.per_class_accuracy()))


def pixel_average_accuracy(acc: ConfusionAccumulator) -> float:
    if acc.total == 0:
        raise NoData("no counted pixels")
    return float(np.trace(acc.counts) / acc.total)


def project_map_labels(
    smap: SurfelMap,
    pose: geo.Pose,
    intr: geo.Intrinsics,
    resolution: tuple[int, int] | None = None,
    baseline: ProbabilityMap | None = None,
) -> np.ndarray:
    """Label image of the map seen from ``pose``; falls back to the baseline argmax, else void."""
    w, h = resolution or intr.resolution
    out = np.full((h, w), VOID, dtype=np.int64)
    if baseline is not None:
        if (baseline.width, baseline.height) != (w, h):
            baseline = rescale_probability_map(baseline, w, h)
        out[:] = baseline.argmax()
    if len(smap):
        idx = visible_set(smap, pose, intr, resolution=(w, h))
        occ = idx.ids >= 0
        if occ.any():
            rows = smap.table.rows(idx.ids[occ])
            out[occ] = np.argmax(smap.table.probs[rows], axis=1)
    return out


def downsample_nearest(img: np.ndarray, width: int, height: int) -> np.ndarray:
    img = np.asarray(img)
    if img.shape[1] == width and img.shape[0] == height:
        return img
    su = nearest_source_index(img.shape[1], width)
    sv = nearest_source_index(img.shape[0], height)
    return img[sv[:, None], su[None, :]]
