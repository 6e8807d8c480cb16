"""Data containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

INVALID_DEPTH = 0.0


class InputError(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


@dataclass
class DepthMap:
    """Dense metric depth raster with an explicit validity mask.

    Invalid pixels always carry ``INVALID_DEPTH`` in ``values``.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise InputError(
                f"depth values {self.values.shape} and mask {self.valid.shape} must be equal 2-D shapes"
            )
        self.valid = self.valid & np.isfinite(self.values) & (self.values > 0)
        self.values = np.where(self.valid, self.values, INVALID_DEPTH)

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values) & (values > 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


@dataclass
class ContextSample:
    """An RGB-D pair offered to the network as geometric context."""

    image: np.ndarray
    depth: DepthMap
    scene_id: int
    provenance: Literal["retrieved", "augmented"] = "retrieved"
    sample_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise InputError(
                f"context image {self.image.shape[:2]} and depth {self.depth.shape} differ in size"
            )


def check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 image, got shape {image.shape}")
    return image
