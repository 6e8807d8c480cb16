"""Perturbation-based depth uncertainty and uncertainty-driven image masking.

The frozen depth model is run on several noisy copies of the image; the
per-pixel coefficient of variation (std / mean) of its outputs is the
uncertainty. Segments where enough pixels are uncertain are kept, everything
else is blacked out before the image is used as a retrieval query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage
from skimage import measure

from .structures import DepthMap, InputError, check_image

MEAN_EPS = 1e-6


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.1
    n: int = 5

    def __post_init__(self):
        if self.sigma < 0:
            raise InputError("sigma must be nonnegative")
        if self.n < 1 or (self.sigma > 0 and self.n < 2):
            raise InputError("at least two noisy variants are needed when sigma > 0")


@dataclass
class UncertaintyMap:
    values: np.ndarray
    valid: np.ndarray


@dataclass
class SegmentMap:
    labels: np.ndarray
    num_segments: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise InputError("segment labels must be 2-D")
        if self.labels.size == 0 or self.num_segments == 0:
            raise InputError("segment map is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_segments:
            raise InputError("segment labels must lie in [0, num_segments)")
        if np.count_nonzero(np.bincount(self.labels.ravel(), minlength=self.num_segments)) != self.num_segments:
            raise InputError("every segment must be nonempty")

    @classmethod
    def from_labels(cls, labels) -> "SegmentMap":
        """Relabel arbitrary integer labels to ``0..K-1`` in ascending label order."""
        labels = np.asarray(labels)
        _, inv = np.unique(labels, return_inverse=True)
        inv = inv.reshape(labels.shape)
        return cls(inv, int(inv.max()) + 1 if inv.size else 0)

    @property
    def shape(self):
        return self.labels.shape


@runtime_checkable
class DepthModelHandle(Protocol):
    """A frozen, deterministic image -> depth evaluator."""

    def __call__(self, image: np.ndarray) -> DepthMap: ...


class ModelEvaluationError(RuntimeError):
    pass


def perturb(image, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    image = check_image(image)
    if cfg.sigma == 0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, cfg.sigma, size=image.shape), 0.0, 1.0)


def _predict_many(model, images: Sequence[np.ndarray]) -> list[DepthMap]:
    batch = getattr(model, "predict_batch", None)
    if batch is not None:
        try:
            return list(batch(images))
        except Exception as exc:
            raise ModelEvaluationError(f"depth model failed on noisy variants 0..{len(images) - 1}: {exc}") from exc
    out = []
    for i, img in enumerate(images):
        try:
            out.append(model(img))
        except Exception as exc:
            raise ModelEvaluationError(f"depth model failed on noisy variant {i}: {exc}") from exc
    return out


def uncertainty_map(model: DepthModelHandle | Callable, image, cfg: NoiseConfig, rng: np.random.Generator) -> UncertaintyMap:
    """Coefficient of variation of the model's depth over ``cfg.n`` noisy copies.

    Each copy draws from its own child generator spawned off ``rng``, so the
    variants are independent of evaluation order. Population std is used and
    the mean is floored at ``MEAN_EPS``.
    """
    image = check_image(image)
    children = rng.spawn(cfg.n)
    noisy = [perturb(image, cfg, child) for child in children]
    depths = _predict_many(model, noisy)
    values = np.stack([d.values for d in depths])
    valid = np.logical_and.reduce([d.valid for d in depths])
    mean = values.mean(axis=0)
    # identical variants give exactly zero, not a rounding residue
    std = np.where(np.ptp(values, axis=0) == 0, 0.0, values.std(axis=0))
    u = std / np.maximum(mean, MEAN_EPS)
    u = np.where(valid, u, 0.0)
    if u.shape != image.shape[:2]:
        u, valid = _resample_nearest(u, valid, image.shape[:2])
    return UncertaintyMap(u, valid)


def _resample_nearest(values, valid, size):
    h, w = values.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return values[np.ix_(rows, cols)], valid[np.ix_(rows, cols)]


def uncertain_pixel_counts(U: UncertaintyMap, S: SegmentMap, h: float) -> np.ndarray:
    """Per segment, the number of valid pixels whose uncertainty exceeds ``h``."""
    above = (U.values > h) & U.valid
    return np.bincount(S.labels.ravel(), weights=above.ravel().astype(np.float64),
                       minlength=S.num_segments).astype(np.int64)


def keep_segments(U: UncertaintyMap, S: SegmentMap, h: float, q: float) -> set[int]:
    """Segments in which strictly more than ``q`` percent of pixels exceed ``h``."""
    if S.num_segments == 0:
        raise InputError("empty segment map")
    if U.values.shape != S.shape:
        raise InputError(f"uncertainty {U.values.shape} and segments {S.shape} differ in size")
    if not (0 <= q <= 100) or h < 0:
        raise InputError("need 0 <= q <= 100 and h >= 0")
    p = uncertain_pixel_counts(U, S, h)
    sizes = np.bincount(S.labels.ravel(), minlength=S.num_segments)
    return {int(s) for s in np.flatnonzero(p * 100 > sizes * q)}


def mask_image(image, S: SegmentMap, kept) -> np.ndarray:
    image = check_image(image)
    if image.shape[:2] != S.shape:
        raise InputError("image and segment map differ in size")
    keep = np.isin(S.labels, np.fromiter(kept, dtype=np.int64, count=len(kept)))
    return np.where(keep[..., None], image, 0.0)


def segment_desk(image, cell: int = 16, levels: int = 4, smooth: float = 0.7) -> SegmentMap:
    """Fallback segmenter: grid cells split into connected components of a
    coarse color quantization."""
    image = check_image(image)
    h, w = image.shape[:2]
    if smooth > 0:
        image = ndimage.gaussian_filter(image, sigma=(smooth, smooth, 0))
    q = np.clip((image * levels).astype(np.int64), 0, levels - 1)
    color = (q[..., 0] * levels + q[..., 1]) * levels + q[..., 2]
    cells = (np.arange(h)[:, None] // cell) * ((w + cell - 1) // cell) + np.arange(w)[None, :] // cell
    key = cells * levels**3 + color
    labels = measure.label(key, background=-1, connectivity=1)
    return SegmentMap.from_labels(labels)
