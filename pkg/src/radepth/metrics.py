"""Depth accuracy metrics, class-restricted evaluation and rare-class selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .structures import DepthMap, InputError

METRIC_NAMES = ("delta1", "delta2", "delta3", "abs_rel", "rms", "rms_log", "log10")


class EmptyEvaluationError(ValueError):
    def __init__(self, message="no pixels to evaluate"):
        super().__init__(message)
        self.pixel_count = 0


@dataclass
class MetricsReport:
    delta1: float = math.nan
    delta2: float = math.nan
    delta3: float = math.nan
    abs_rel: float = math.nan
    rms: float = math.nan
    rms_log: float = math.nan
    log10: float = math.nan
    pixel_count: int = 0
    empty: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsAccumulator:
    """Pixel-weighted running sums; adding two accumulators equals
    evaluating the union of their pixels."""

    n: int = 0
    sums: dict = field(default_factory=lambda: dict.fromkeys(
        ("d1", "d2", "d3", "abs_rel", "sq", "sq_log", "log10"), 0.0))

    def add_pixels(self, p: np.ndarray, g: np.ndarray) -> None:
        ratio = np.maximum(p / g, g / p)
        log_diff = np.log(p) - np.log(g)
        self.n += p.size
        s = self.sums
        s["d1"] += float(np.count_nonzero(ratio < 1.25))
        s["d2"] += float(np.count_nonzero(ratio < 1.25**2))
        s["d3"] += float(np.count_nonzero(ratio < 1.25**3))
        s["abs_rel"] += float(np.sum(np.abs(p - g) / g))
        s["sq"] += float(np.sum((p - g) ** 2))
        s["sq_log"] += float(np.sum(log_diff**2))
        s["log10"] += float(np.sum(np.abs(np.log10(p) - np.log10(g))))

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        out = MetricsAccumulator(self.n + other.n)
        out.sums = {k: self.sums[k] + other.sums[k] for k in self.sums}
        return out

    def report(self) -> MetricsReport:
        if self.n == 0:
            return MetricsReport(empty=True)
        n = self.n
        s = self.sums
        return MetricsReport(
            delta1=s["d1"] / n,
            delta2=s["d2"] / n,
            delta3=s["d3"] / n,
            abs_rel=s["abs_rel"] / n,
            rms=math.sqrt(s["sq"] / n),
            rms_log=math.sqrt(s["sq_log"] / n),
            log10=s["log10"] / n,
            pixel_count=n,
        )


def evaluation_mask(pred: DepthMap, gt: DepthMap, mask=None, min_depth=None, max_depth=None) -> np.ndarray:
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    sel = pred.valid & gt.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise InputError("mask shape differs from depth shape")
        sel &= mask
    if min_depth is not None:
        sel &= gt.values >= min_depth
    if max_depth is not None:
        sel &= gt.values <= max_depth
    return sel


def accumulate(pred: DepthMap, gt: DepthMap, mask=None, min_depth=None, max_depth=None) -> MetricsAccumulator:
    sel = evaluation_mask(pred, gt, mask, min_depth, max_depth)
    acc = MetricsAccumulator()
    if sel.any():
        acc.add_pixels(pred.values[sel], gt.values[sel])
    return acc


def depth_metrics(pred: DepthMap, gt: DepthMap, mask=None, min_depth=None, max_depth=None) -> MetricsReport:
    """delta_n, AbsRel, RMS, RMS_log (natural log) and mean |log10| error over
    pixels valid in both maps and inside ``mask``."""
    acc = accumulate(pred, gt, mask, min_depth, max_depth)
    if acc.n == 0:
        raise EmptyEvaluationError()
    return acc.report()


def class_mask(class_map, target_classes: Iterable[int]) -> np.ndarray:
    targets = np.fromiter(target_classes, dtype=np.int64)
    return np.isin(np.asarray(class_map), targets)


def class_masked_eval(pred: DepthMap, gt: DepthMap, class_map, target_classes, **kw) -> MetricsReport:
    class_map = np.asarray(class_map)
    if class_map.shape != gt.shape:
        raise InputError("class map and depth differ in size")
    acc = accumulate(pred, gt, class_mask(class_map, target_classes), **kw)
    return acc.report()


def mean_of_reports(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Per-image averaging; empty reports are skipped."""
    reps = [r for r in reports if not r.empty]
    if not reps:
        return MetricsReport(empty=True)
    vals = {k: float(np.mean([getattr(r, k) for r in reps])) for k in METRIC_NAMES}
    return MetricsReport(**vals, pixel_count=sum(r.pixel_count for r in reps))


@dataclass
class ClassStats:
    image_frequency: dict[int, float]
    occurrence_count: dict[int, int]
    num_images: int = 0


def compute_class_stats(class_maps: Iterable[np.ndarray], ignore=()) -> ClassStats:
    """Fraction of images containing each class and its number of instances
    (4-connected components)."""
    images_with: dict[int, int] = {}
    occurrences: dict[int, int] = {}
    total = 0
    for cm in class_maps:
        cm = np.asarray(cm)
        total += 1
        for c in np.unique(cm):
            c = int(c)
            if c in ignore:
                continue
            images_with[c] = images_with.get(c, 0) + 1
            _, n = ndimage.label(cm == c)
            occurrences[c] = occurrences.get(c, 0) + n
    freq = {c: k / total for c, k in images_with.items()} if total else {}
    return ClassStats(freq, occurrences, total)


def select_underrepresented(stats: ClassStats, freq_cap: float = 0.10, min_occurrences: int = 5) -> set[int]:
    return {
        c for c, f in stats.image_frequency.items()
        if f < freq_cap and stats.occurrence_count.get(c, 0) > min_occurrences
    }
