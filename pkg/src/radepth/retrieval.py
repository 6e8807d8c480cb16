"""Image descriptors, an exact cosine KNN index and uncertainty-aware retrieval."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .structures import ContextSample, InputError, check_image
from .uncertainty import (
    NoiseConfig,
    SegmentMap,
    UncertaintyMap,
    keep_segments,
    mask_image,
    uncertainty_map,
)

MAGIC = b"RADD"
VERSION = 1

COLOR_LEVELS = 6
ORIENT_BINS = 8
GRAD_GRID = 2
GRAD_WEIGHT = 0.5
# fourth root: a small object's few bins still count against a whole-image histogram
HIST_POWER = 0.25


@dataclass
class Descriptor:
    vector: np.ndarray
    valid: bool


def compute_descriptor(image) -> Descriptor:
    """Coarse color histogram plus gridded gradient-orientation histograms.

    Exactly-black pixels are treated as absent, so a masked image describes
    only its kept regions and an all-black image has no descriptor. Both
    histograms are compressed with ``HIST_POWER`` before the final L2
    normalization.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    present = image.max(axis=2) > 0

    q = np.clip((image * COLOR_LEVELS).astype(np.int64), 0, COLOR_LEVELS - 1)
    bins = (q[..., 0] * COLOR_LEVELS + q[..., 1]) * COLOR_LEVELS + q[..., 2]
    color = np.bincount(bins[present], minlength=COLOR_LEVELS**3) / (h * w)

    gray = image.mean(axis=2)
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    interior = ndimage.binary_erosion(present, structure=np.ones((3, 3)), border_value=1)
    mag = np.where(interior, np.hypot(gx, gy), 0.0)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    obin = np.minimum((ang / (2 * np.pi) * ORIENT_BINS).astype(np.int64), ORIENT_BINS - 1)
    cell = (np.arange(h)[:, None] * GRAD_GRID // h) * GRAD_GRID + np.arange(w)[None, :] * GRAD_GRID // w
    grad = np.bincount((cell * ORIENT_BINS + obin).ravel(), weights=mag.ravel(),
                       minlength=GRAD_GRID**2 * ORIENT_BINS) / (h * w)

    raw = np.concatenate([color**HIST_POWER, GRAD_WEIGHT * grad**HIST_POWER])
    return descriptor_from_vector(raw)


def descriptor_from_vector(raw) -> Descriptor:
    raw = np.asarray(raw, dtype=np.float64).ravel()
    norm = np.linalg.norm(raw)
    if norm == 0 or not np.isfinite(norm):
        return Descriptor(np.zeros(len(raw), dtype=np.float32), False)
    return Descriptor((raw / norm).astype(np.float32), True)


@dataclass(frozen=True)
class DescriptorIndex:
    ids: np.ndarray
    scene_ids: np.ndarray
    vectors: np.ndarray
    skipped: tuple = ()

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(pool: Iterable) -> DescriptorIndex:
    """Build from ``(id, scene_id, Descriptor | image | vector)`` triples.

    Invalid descriptors are left out and listed in ``skipped``.
    """
    ids, scenes, vecs, skipped = [], [], [], []
    seen = set()
    dim = None
    count = 0
    for item_id, scene_id, item in pool:
        count += 1
        item_id = int(item_id)
        if item_id in seen:
            raise InputError(f"duplicate id {item_id} in pool")
        seen.add(item_id)
        if isinstance(item, Descriptor):
            desc = item
        else:
            arr = np.asarray(item)
            desc = compute_descriptor(arr) if arr.ndim == 3 else descriptor_from_vector(arr)
        if dim is None:
            dim = len(desc.vector)
        elif len(desc.vector) != dim:
            raise InputError(f"descriptor of id {item_id} has dimension {len(desc.vector)}, expected {dim}")
        if not desc.valid:
            skipped.append(item_id)
            continue
        ids.append(item_id)
        scenes.append(int(scene_id))
        vecs.append(desc.vector)
    if count == 0:
        raise InputError("cannot build an index from an empty pool")
    vectors = np.asarray(vecs, dtype=np.float32).reshape(len(vecs), dim)
    return _freeze(np.asarray(ids, dtype=np.int64), np.asarray(scenes, dtype=np.int64), vectors, tuple(skipped))


def _freeze(ids, scenes, vectors, skipped=()):
    for arr in (ids, scenes, vectors):
        arr.setflags(write=False)
    return DescriptorIndex(ids, scenes, vectors, skipped)


@dataclass
class KnnResult:
    ids: list[int]
    similarities: list[float]
    status: str = "ok"  # ok | no_eligible


def knn_query(index: DescriptorIndex, query: Descriptor, M: int, exclude_scene=None) -> KnnResult:
    """Top-``M`` cosine neighbours outside ``exclude_scene``.

    Ordered by descending similarity, ties by ascending id.
    """
    if not query.valid:
        raise InputError("query descriptor is invalid")
    if M < 1:
        raise InputError("M must be at least 1")
    eligible = np.ones(len(index), bool) if exclude_scene is None else index.scene_ids != int(exclude_scene)
    if not eligible.any():
        return KnnResult([], [], "no_eligible")
    pos = np.flatnonzero(eligible)
    sims = index.vectors[pos].astype(np.float64) @ query.vector.astype(np.float64)
    order = np.lexsort((index.ids[pos], -sims))[:M]
    return KnnResult([int(i) for i in index.ids[pos][order]], [float(s) for s in sims[order]])


# ---------------------------------------------------------------------------
# descriptor file
# ---------------------------------------------------------------------------


def save_index(index: DescriptorIndex, path) -> None:
    n, d = index.vectors.shape
    if n and (index.scene_ids.min() < 0 or index.scene_ids.max() >= 2**32 or index.ids.min() < 0):
        raise InputError("ids and scene ids must be nonnegative and scene ids must fit in 32 bits")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, d))
        fh.write(index.vectors.astype("<f4").tobytes())
        fh.write(index.ids.astype("<u8").tobytes())
        fh.write(index.scene_ids.astype("<u4").tobytes())


def load_index(path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a descriptor file")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    off = 16
    expected = off + n * d * 4 + n * 8 + n * 4
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {len(data)}")
    vectors = np.frombuffer(data, "<f4", n * d, off).reshape(n, d).astype(np.float32)
    off += n * d * 4
    ids = np.frombuffer(data, "<u8", n, off).astype(np.int64)
    off += n * 8
    scenes = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    return _freeze(ids, scenes, vectors)


# ---------------------------------------------------------------------------
# uncertainty-aware retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalConfig:
    M: int = 4
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    h: float = 0.05
    q: float = 20.0
    use_uncertainty: bool = True


@dataclass
class RetrievalResult:
    samples: list[ContextSample]
    ids: list[int]
    similarities: list[float]
    status: str
    fallback_unmasked: bool = False
    uncertainty: UncertaintyMap | None = None
    kept: set = field(default_factory=set)
    query_image: np.ndarray | None = None


def retrieve_context(
    image,
    model,
    seg: SegmentMap,
    index: DescriptorIndex,
    pool_store: Mapping[int, ContextSample],
    cfg: RetrievalConfig,
    rng: np.random.Generator,
    scene_id=None,
) -> RetrievalResult:
    """Mask the image to its uncertain segments and fetch its nearest pool
    samples from other scenes.

    With ``cfg.use_uncertainty`` off the unmasked image is the query (global
    retrieval). An empty kept set also falls back to the unmasked image.
    """
    image = check_image(image)
    U, kept = None, set()
    fallback = False
    if cfg.use_uncertainty:
        U = uncertainty_map(model, image, cfg.noise, rng)
        kept = keep_segments(U, seg, cfg.h, cfg.q)
        query = mask_image(image, seg, kept) if kept else image
        fallback = not kept
    else:
        query = image
    desc = compute_descriptor(query)
    if not desc.valid:
        fallback = True
        query = image
        desc = compute_descriptor(image)
    if not desc.valid:
        return RetrievalResult([], [], [], "invalid_query", fallback, U, kept, query)
    res = knn_query(index, desc, cfg.M, exclude_scene=scene_id)
    if res.status != "ok":
        return RetrievalResult([], [], [], "no_eligible", fallback, U, kept, query)
    samples = []
    for i in res.ids:
        s = pool_store[i]
        if scene_id is not None and s.scene_id == scene_id:
            raise InputError(f"pool store disagrees with the index about the scene of sample {i}")
        samples.append(s)
    return RetrievalResult(samples, res.ids, res.similarities, "ok", fallback, U, kept, query)
