"""Pixel correspondences between an input image and its context images.

Two sources feed the same :class:`CorrespondenceSet` container: the desk-scale
matcher :func:`match_desk` (gradient-maximum keypoints, normalized
cross-correlation, mutual-nearest plus ratio test) and externally computed
matches loaded from the JSON interchange file. Matches are then quantized to the
network's patch grid and expanded into per-token neighborhoods.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .structures import InputError, check_image


class MatchFileError(ValueError):
    """Malformed or out-of-bounds match interchange file."""


@dataclass
class CorrespondenceSet:
    """Pixel pairs ``(u_a, v_a, u_b, v_b, score)`` between images a and b.

    ``image_a_size`` and ``image_b_size`` are ``(H, W)``.
    """

    pairs: np.ndarray
    image_a_size: tuple[int, int]
    image_b_size: tuple[int, int]

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.float64)
        if pairs.size == 0:
            pairs = pairs.reshape(0, 5)
        if pairs.ndim != 2 or pairs.shape[1] != 5:
            raise InputError(f"pairs must be an N x 5 array, got {pairs.shape}")
        self.pairs = pairs
        self.image_a_size = tuple(int(s) for s in self.image_a_size)
        self.image_b_size = tuple(int(s) for s in self.image_b_size)
        bad = _out_of_bounds(self.pairs, self.image_a_size, self.image_b_size)
        if bad is not None:
            raise InputError(f"pair {bad} lies outside the image bounds or has a score outside [0, 1]")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def empty(cls, size_a, size_b) -> "CorrespondenceSet":
        return cls(np.zeros((0, 5)), size_a, size_b)


def _out_of_bounds(pairs, size_a, size_b):
    if len(pairs) == 0:
        return None
    ha, wa = size_a
    hb, wb = size_b
    ok = (
        (pairs[:, 0] >= 0) & (pairs[:, 0] < wa)
        & (pairs[:, 1] >= 0) & (pairs[:, 1] < ha)
        & (pairs[:, 2] >= 0) & (pairs[:, 2] < wb)
        & (pairs[:, 3] >= 0) & (pairs[:, 3] < hb)
        & (pairs[:, 4] >= 0) & (pairs[:, 4] <= 1)
        & np.all(np.isfinite(pairs), axis=1)
    )
    if ok.all():
        return None
    return int(np.flatnonzero(~ok)[0])


# ---------------------------------------------------------------------------
# interchange file
# ---------------------------------------------------------------------------


def save_matches(matches: CorrespondenceSet, path) -> None:
    doc = {
        "pairs": [[float(x) for x in row] for row in matches.pairs],
        "image_a_size": list(matches.image_a_size),
        "image_b_size": list(matches.image_b_size),
    }
    Path(path).write_text(json.dumps(doc))


def load_matches(path, image_a_size=None, image_b_size=None) -> CorrespondenceSet:
    """Parse a match interchange file.

    Image sizes stored in the file are used unless given explicitly. Without
    any size information coordinates are only checked for being nonnegative.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MatchFileError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "pairs" not in doc:
        raise MatchFileError(f"{path}: expected an object with a 'pairs' list")
    raw = doc["pairs"]
    if not isinstance(raw, list):
        raise MatchFileError(f"{path}: 'pairs' must be a list")
    for i, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 5 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in row
        ):
            raise MatchFileError(f"{path}: pair {i} must be a list of 5 numbers")
    pairs = np.asarray(raw, dtype=np.float64).reshape(-1, 5)
    size_a = image_a_size or doc.get("image_a_size")
    size_b = image_b_size or doc.get("image_b_size")
    if size_a is None or size_b is None:
        big = 2**31
        size_a = size_a or (big, big)
        size_b = size_b or (big, big)
    bad = _out_of_bounds(pairs, tuple(size_a), tuple(size_b))
    if bad is not None:
        raise MatchFileError(f"{path}: pair {bad} is out of bounds: {raw[bad]}")
    return CorrespondenceSet(pairs, size_a, size_b)


# ---------------------------------------------------------------------------
# desk-scale matcher
# ---------------------------------------------------------------------------


@dataclass
class MatchConfig:
    ratio: float = 0.8
    patch_radius: int = 4
    nms_radius: int = 1
    min_gradient: float = 0.02
    max_keypoints: int = 400
    min_score: float = 0.0


def detect_keypoints(image: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    """Local maxima of gradient magnitude, returned as integer ``(u, v)`` rows
    sorted by decreasing strength."""
    gray = image.mean(axis=2)
    mag = np.hypot(ndimage.sobel(gray, axis=1), ndimage.sobel(gray, axis=0))
    size = 2 * cfg.nms_radius + 1
    peaks = (mag == ndimage.maximum_filter(mag, size=size, mode="nearest")) & (mag > cfg.min_gradient)
    r = cfg.patch_radius
    peaks[:r, :] = False
    peaks[-r:, :] = False
    peaks[:, :r] = False
    peaks[:, -r:] = False
    v, u = np.nonzero(peaks)
    strength = mag[v, u]
    # Stable order: strength descending, then raster order.
    order = np.lexsort((u, v, -strength))[: cfg.max_keypoints]
    return np.stack([u[order], v[order]], axis=1)


def _patch_descriptors(image: np.ndarray, kps: np.ndarray, r: int) -> np.ndarray:
    if len(kps) == 0:
        return np.zeros((0, (2 * r + 1) ** 2 * image.shape[2]))
    offs = np.arange(-r, r + 1)
    vv = kps[:, 1, None, None] + offs[None, :, None]
    uu = kps[:, 0, None, None] + offs[None, None, :]
    patches = image[vv, uu]  # K x P x P x C
    patches = patches - patches.mean(axis=(1, 2), keepdims=True)
    flat = patches.reshape(len(kps), -1)
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    return np.divide(flat, norm, out=np.zeros_like(flat), where=norm > 1e-12)


def match_desk(a: np.ndarray, b: np.ndarray, cfg: MatchConfig | None = None) -> CorrespondenceSet:
    """Match two images with NCC patch descriptors.

    A pair survives if it is mutually nearest and passes the ratio test on the
    descriptor distance ``sqrt(2 - 2 * ncc)``. The score is the clipped NCC.
    """
    cfg = cfg or MatchConfig()
    a = check_image(a)
    b = check_image(b)
    size_a, size_b = a.shape[:2], b.shape[:2]
    kp_a = detect_keypoints(a, cfg)
    kp_b = detect_keypoints(b, cfg)
    if len(kp_a) == 0 or len(kp_b) < 2:
        return CorrespondenceSet.empty(size_a, size_b)
    da = _patch_descriptors(a, kp_a, cfg.patch_radius)
    db = _patch_descriptors(b, kp_b, cfg.patch_radius)
    ncc = np.clip(da @ db.T, -1.0, 1.0)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * ncc, 0.0))

    best_b = np.argmin(dist, axis=1)
    best_a = np.argmin(dist, axis=0)
    two = np.partition(dist, 1, axis=1)[:, :2]
    rows = np.arange(len(kp_a))
    keep = (best_a[best_b] == rows) & (two[:, 0] < cfg.ratio * two[:, 1])
    score = np.clip(ncc[rows, best_b], 0.0, 1.0)
    keep &= score >= cfg.min_score
    idx = np.flatnonzero(keep)
    pairs = np.column_stack([kp_a[idx], kp_b[best_b[idx]], score[idx]]).astype(np.float64)
    return CorrespondenceSet(pairs.reshape(-1, 5), size_a, size_b)


# ---------------------------------------------------------------------------
# token grid
# ---------------------------------------------------------------------------


def grid_shape(size: tuple[int, int], patch: int) -> tuple[int, int]:
    return math.ceil(size[0] / patch), math.ceil(size[1] / patch)


def pixels_to_tokens(matches: CorrespondenceSet, patch: int, scale_a: float = 1.0, scale_b: float = 1.0) -> np.ndarray:
    """Quantize pixel pairs to unique token pairs ``(row_a, col_a, row_b, col_b)``.

    ``scale_a``/``scale_b`` map match coordinates onto the network input
    resolution before quantization.
    """
    if len(matches) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    p = matches.pairs
    ga = grid_shape(_scaled(matches.image_a_size, scale_a), patch)
    gb = grid_shape(_scaled(matches.image_b_size, scale_b), patch)
    toks = np.column_stack([
        np.floor(p[:, 1] * scale_a / patch),
        np.floor(p[:, 0] * scale_a / patch),
        np.floor(p[:, 3] * scale_b / patch),
        np.floor(p[:, 2] * scale_b / patch),
    ]).astype(np.int64)
    toks[:, 0] = np.clip(toks[:, 0], 0, ga[0] - 1)
    toks[:, 1] = np.clip(toks[:, 1], 0, ga[1] - 1)
    toks[:, 2] = np.clip(toks[:, 2], 0, gb[0] - 1)
    toks[:, 3] = np.clip(toks[:, 3], 0, gb[1] - 1)
    # unique rows via a scalar key; row-wise np.unique is far slower
    key = ((toks[:, 0] * ga[1] + toks[:, 1]) * gb[0] + toks[:, 2]) * gb[1] + toks[:, 3]
    key = np.unique(key)
    out = np.empty((len(key), 4), dtype=np.int64)
    key, out[:, 3] = np.divmod(key, gb[1])
    key, out[:, 2] = np.divmod(key, gb[0])
    out[:, 0], out[:, 1] = np.divmod(key, ga[1])
    return out


def _scaled(size, scale):
    return (max(1, int(round(size[0] * scale))), max(1, int(round(size[1] * scale))))


@dataclass
class TokenMatchMap:
    """``matching_tokens(j)`` for every input token j.

    ``sets[j]`` holds ``(context_index, context_token_index)`` pairs, where the
    token index is row-major on the context grid.
    """

    num_tokens: int
    context_grid: tuple[int, int]
    num_contexts: int
    sets: list[set] = field(default_factory=list)

    def __post_init__(self):
        if not self.sets:
            self.sets = [set() for _ in range(self.num_tokens)]
        if len(self.sets) != self.num_tokens:
            raise InputError("one match set per input token is required")

    @classmethod
    def empty(cls, num_tokens, context_grid, num_contexts=0) -> "TokenMatchMap":
        return cls(num_tokens, tuple(context_grid), num_contexts)

    @property
    def context_tokens(self) -> int:
        return self.context_grid[0] * self.context_grid[1]

    def total(self) -> int:
        return sum(len(s) for s in self.sets)

    def validate(self, num_contexts: int | None = None) -> None:
        m = self.num_contexts if num_contexts is None else num_contexts
        n = self.context_tokens
        for j, s in enumerate(self.sets):
            for img, tok in s:
                if not (0 <= img < m):
                    raise InputError(f"token {j} references missing context image {img}")
                if not (0 <= tok < n):
                    raise InputError(f"token {j} references context token {tok} outside the {self.context_grid} grid")

    def to_padded(self, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Flat gather indices ``img * N_c + tok`` padded to a common length."""
        n = self.context_tokens
        lists = [sorted(img * n + tok for img, tok in s) for s in self.sets]
        length = max([len(x) for x in lists] + [0])
        if max_len is not None:
            length = max(length, max_len)
        index = np.zeros((self.num_tokens, length), dtype=np.int64)
        mask = np.zeros((self.num_tokens, length), dtype=bool)
        for j, lst in enumerate(lists):
            index[j, : len(lst)] = lst
            mask[j, : len(lst)] = True
        return index, mask

    @classmethod
    def full(cls, num_tokens, context_grid, num_contexts) -> "TokenMatchMap":
        """Every input token matched to every context token."""
        n = context_grid[0] * context_grid[1]
        everything = {(m, t) for m in range(num_contexts) for t in range(n)}
        return cls(num_tokens, tuple(context_grid), num_contexts, [set(everything) for _ in range(num_tokens)])


def expand_matching_tokens(
    raw_pairs: list[np.ndarray],
    radius: int,
    input_grid: tuple[int, int],
    context_grid: tuple[int, int],
    num_contexts: int | None = None,
) -> TokenMatchMap:
    """Unite the clipped ``(2r+1)^2`` neighborhoods of matched context tokens.

    ``raw_pairs[m]`` holds the token pairs against context image ``m``.
    """
    if radius < 0:
        raise InputError("radius must be nonnegative")
    m_total = len(raw_pairs) if num_contexts is None else num_contexts
    if len(raw_pairs) > m_total:
        raise InputError("more raw pair lists than context images")
    gr, gc = context_grid
    n_in = input_grid[0] * input_grid[1]
    out = TokenMatchMap.empty(n_in, context_grid, m_total)
    offs = np.arange(-radius, radius + 1)
    dr, dc = (a.ravel() for a in np.meshgrid(offs, offs, indexing="ij"))
    n_ctx = gr * gc
    keys = []
    for m, pairs in enumerate(raw_pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 4)
        j = pairs[:, 0] * input_grid[1] + pairs[:, 1]
        r = pairs[:, 2, None] + dr
        c = pairs[:, 3, None] + dc
        ok = (r >= 0) & (r < gr) & (c >= 0) & (c < gc)
        flat = m * n_ctx + r * gc + c
        keys.append((np.broadcast_to(j[:, None], ok.shape)[ok] * (m_total * n_ctx) + flat[ok]))
    if keys:
        key = np.unique(np.concatenate(keys))
        j, flat = np.divmod(key, m_total * n_ctx)
        img, tok = np.divmod(flat, n_ctx)
        for a, b, t in zip(j.tolist(), img.tolist(), tok.tolist()):
            out.sets[a].add((b, t))
    return out
