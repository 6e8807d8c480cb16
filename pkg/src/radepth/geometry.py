"""Pinhole back-projection, z-buffered point rendering and pose sampling.

These are the building blocks of 3D augmentation: an RGB-D frame is lifted to
a point cloud, re-rendered from a nearby random pose, and the pixels that stay
visible give exact correspondences between the two views.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .correspondence import CorrespondenceSet
from .structures import ContextSample, DepthMap, InputError, check_image

VISIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, s: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s)


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking source-camera points into the new camera frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise InputError("rotation must be 3 x 3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise InputError("rotation must be orthonormal with determinant 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def angle_deg(self) -> float:
        c = np.clip((np.trace(self.R) - 1) / 2, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


@dataclass(frozen=True)
class PoseBounds:
    max_angle_deg: float = 10.0
    max_translation: float = 0.1

    def __post_init__(self):
        if self.max_angle_deg < 0 or self.max_translation < 0:
            raise InputError("pose bounds must be nonnegative")

    @classmethod
    def for_depth(cls, depth: DepthMap, max_angle_deg=10.0, fraction=0.05) -> "PoseBounds":
        """Translation bound as a fraction of the scene's median valid depth."""
        med = float(np.median(depth.values[depth.valid])) if depth.valid.any() else 1.0
        return cls(max_angle_deg, fraction * med)


@dataclass
class PointCloud:
    points: np.ndarray  # N x 3, meters
    colors: np.ndarray  # N x 3
    source_pixel: np.ndarray  # N x 2 integer (u, v)

    def __len__(self) -> int:
        return len(self.points)


def backproject(image, depth: DepthMap, K: CameraIntrinsics) -> PointCloud:
    image = check_image(image)
    if image.shape[:2] != depth.shape:
        raise InputError(f"image {image.shape[:2]} and depth {depth.shape} differ in size")
    v, u = np.nonzero(depth.valid)
    d = depth.values[v, u]
    pts = np.column_stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])
    return PointCloud(pts, image[v, u], np.column_stack([u, v]))


def _to_pixels(cloud: PointCloud, K: CameraIntrinsics, pose: Pose, out_size):
    """Camera-frame depth and nearest pixel for every point; culled points flagged."""
    h, w = out_size
    cam = cloud.points @ pose.R.T + pose.t
    z = cam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = K.fx * cam[:, 0] / zs + K.cx
    v = K.fy * cam[:, 1] / zs + K.cy
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    inside = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    ui = np.where(inside, ui, 0).astype(np.int64)
    vi = np.where(inside, vi, 0).astype(np.int64)
    return z, u, v, ui, vi, inside


def _zbuffer(z, ui, vi, inside, out_size):
    """Direct-hit z-buffer: per pixel the index of the nearest point, or -1."""
    h, w = out_size
    winner = np.full(h * w, -1, dtype=np.int64)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return winner.reshape(h, w)
    flat = vi[idx] * w + ui[idx]
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winner[flat_sorted[first]] = idx[order[first]]
    return winner.reshape(h, w)


def project(cloud: PointCloud, K: CameraIntrinsics, pose: Pose, out_size, splat_radius: int = 1):
    """Render a point cloud into a new view.

    Each point lands on its nearest pixel and the nearest point wins. Pixels
    no point lands on directly are then filled from the nearest direct hit
    within ``splat_radius`` (Chebyshev distance); everything else stays
    invalid. Returns ``(image, depth)``.
    """
    image, depth, _ = _render(cloud, K, pose, out_size, splat_radius)
    return image, depth


def _render(cloud, K, pose, out_size, splat_radius):
    h, w = out_size
    if h <= 0 or w <= 0:
        raise InputError("output size must be positive")
    image = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    if len(cloud) == 0:
        return image, DepthMap(depth, np.zeros((h, w), bool)), None
    z, _, _, ui, vi, inside = proj = _to_pixels(cloud, K, pose, out_size)
    winner = _zbuffer(z, ui, vi, inside, out_size)
    hit = winner >= 0
    depth[hit] = z[winner[hit]]
    image[hit] = cloud.colors[winner[hit]]
    if splat_radius > 0:
        fill_z = np.full((h, w), np.inf)
        fill_c = np.zeros((h, w, 3))
        pad = splat_radius
        zpad = np.pad(np.where(hit, depth, np.inf), pad, constant_values=np.inf)
        cpad = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
        for dy in range(-pad, pad + 1):
            for dx in range(-pad, pad + 1):
                if dy == 0 and dx == 0:
                    continue
                zs = zpad[pad + dy: pad + dy + h, pad + dx: pad + dx + w]
                better = zs < fill_z
                fill_z = np.where(better, zs, fill_z)
                fill_c[better] = cpad[pad + dy: pad + dy + h, pad + dx: pad + dx + w][better]
        holes = ~hit & np.isfinite(fill_z)
        depth[holes] = fill_z[holes]
        image[holes] = fill_c[holes]
    return image, DepthMap(depth, depth > 0), (proj, hit)


def sample_pose(rng: np.random.Generator, bounds: PoseBounds = PoseBounds()) -> Pose:
    """Rotation about a uniformly random axis by an angle uniform in
    ``[0, max_angle]``; translation uniform in the cube ``[-b, b]^3``."""
    axis = rng.normal(size=3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = np.radians(rng.uniform(0.0, bounds.max_angle_deg))
    t = rng.uniform(-bounds.max_translation, bounds.max_translation, size=3)
    if bounds.max_angle_deg == 0:
        R = np.eye(3)
    else:
        R = Rotation.from_rotvec(axis * angle).as_matrix()
    return Pose(R, t)


def make_context_3d(image, depth: DepthMap, K: CameraIntrinsics, pose: Pose, splat_radius: int = 1,
                    tol: float = VISIBILITY_TOL):
    """Render ``(image, depth)`` from ``pose`` and return the analytic
    correspondences of every source pixel that remains visible.

    A source pixel is visible when it is the z-buffer winner of the pixel it
    projects to, or ties with the winner within ``tol``.
    """
    image = check_image(image)
    size = depth.shape
    cloud = backproject(image, depth, K)
    rendered, rdepth, extra = _render(cloud, K, pose, size, splat_radius)
    sample = ContextSample(rendered, rdepth, scene_id=-1, provenance="augmented")
    if len(cloud) == 0:
        sample.meta["empty_view"] = True
        warnings.warn("3D augmentation produced no visible points", RuntimeWarning, stacklevel=2)
        return sample, CorrespondenceSet.empty(size, size)
    (z, _, _, ui, vi, inside), direct = extra
    visible = inside.copy()
    visible[inside] = np.abs(z[inside] - np.where(direct[vi[inside], ui[inside]],
                                                   rdepth.values[vi[inside], ui[inside]], np.inf)) <= tol
    idx = np.flatnonzero(visible)
    if len(idx) == 0:
        sample.meta["empty_view"] = True
        warnings.warn("3D augmentation pose leaves no visible points", RuntimeWarning, stacklevel=2)
        return sample, CorrespondenceSet.empty(size, size)
    src = cloud.source_pixel[idx]
    pairs = np.column_stack([src[:, 0], src[:, 1], ui[idx], vi[idx], np.ones(len(idx))]).astype(np.float64)
    return sample, CorrespondenceSet(pairs, size, size)
