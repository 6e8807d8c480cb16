"""Procedural indoor scenes with exact depth and per-pixel class labels.

A scene is a box-shaped room (floor, back wall, side walls, ceiling) seen by a
level camera, furnished with common objects that stand on the floor and,
occasionally, rare objects. Rare objects float freely, so nothing in the room
geometry reveals their distance: each rare class lives at its own
characteristic depth and wears its own two-color pattern. A model can only
learn that depth from the few training images containing the class, or read
it off a context image showing the same class.

All classes, palettes and rare-class properties come from a ``Palette`` that
is shared by every scene of a corpus; per-scene randomness comes from the
scene seed alone.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics
from .structures import DepthMap, InputError

FLOOR, WALL, CEILING, BOX, BALL, PILLAR = range(6)
FIRST_RARE = 6
CLASS_NAMES = {FLOOR: "floor", WALL: "wall", CEILING: "ceiling", BOX: "box", BALL: "ball", PILLAR: "pillar"}

SATURATED = np.array([
    [0.92, 0.10, 0.10], [0.10, 0.80, 0.15], [0.10, 0.25, 0.95], [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.80], [0.10, 0.85, 0.90], [1.00, 0.55, 0.00], [0.55, 0.10, 0.90],
    [0.98, 0.98, 0.98], [0.05, 0.05, 0.05],
])


@dataclass
class RareClass:
    label: int
    depth: float
    size: float
    colors: np.ndarray  # 2 x 3
    pattern: np.ndarray  # g x g booleans


@dataclass
class Palette:
    rare: list[RareClass]
    box_color: tuple = (0.55, 0.36, 0.22)
    ball_color: tuple = (0.30, 0.45, 0.72)
    pillar_color: tuple = (0.52, 0.60, 0.50)

    @property
    def rare_labels(self) -> list[int]:
        return [r.label for r in self.rare]


def make_palette(world_seed: int = 0, num_rare: int = 8, depth_range=(1.3, 3.6), apparent_px=(20.0, 28.0),
                 focal: float = 60.0, pattern_cells: int = 4, contrast: float = 1.0) -> Palette:
    """Draw the corpus-wide rare classes: depth, physical size, color pair and
    binary pattern for each. ``contrast`` below 1 pulls the colors toward
    mid gray."""
    rng = np.random.default_rng(world_seed)
    pairs = [(i, j) for i in range(len(SATURATED)) for j in range(len(SATURATED)) if i < j]
    chosen = rng.choice(len(pairs), size=num_rare, replace=False)
    depths = np.linspace(*depth_range, num_rare)
    rng.shuffle(depths)
    rare = []
    for k in range(num_rare):
        i, j = pairs[chosen[k]]
        px = rng.uniform(*apparent_px)
        pattern = rng.random((pattern_cells, pattern_cells)) < 0.5
        pattern[0, 0], pattern[-1, -1] = True, False
        rare.append(RareClass(FIRST_RARE + k, float(depths[k]), float(depths[k] * px / focal),
                              0.5 + contrast * (SATURATED[[i, j]] - 0.5), pattern))
    return Palette(rare)


@dataclass
class SyntheticSceneSpec:
    seed: int
    palette: Palette
    size: tuple[int, int] = (64, 64)
    focal: float = 60.0
    camera_height: tuple = (1.2, 1.7)
    wall_depth: tuple = (4.0, 9.0)
    room_width: tuple = (4.0, 8.0)
    room_height: tuple = (2.6, 3.2)
    common_probability: float = 0.6
    rare_probability: float = 0.05
    depth_jitter: float = 0.04
    brightness: tuple = (0.8, 1.1)
    pixel_noise: float = 0.01

    def __post_init__(self):
        if not (0 <= self.rare_probability <= 1 and 0 <= self.common_probability <= 1):
            raise InputError("probabilities must lie in [0, 1]")


@dataclass
class SynthScene:
    image: np.ndarray
    depth: DepthMap
    K: CameraIntrinsics
    class_map: np.ndarray
    injected: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.image, self.depth, self.K, self.class_map))


def sample_rare_injections(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[int]:
    draws = rng.random(len(spec.palette.rare))
    return [r.label for r, x in zip(spec.palette.rare, draws) if x < spec.rare_probability]


class _Canvas:
    def __init__(self, h, w, K):
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        self.dx = (u - K.cx) / K.fx
        self.dy = (v - K.cy) / K.fy
        self.depth = np.full((h, w), np.inf)
        self.color = np.zeros((h, w, 3))
        self.label = np.zeros((h, w), dtype=np.int64)

    def paint(self, t, color, label):
        hit = np.isfinite(t) & (t > 0) & (t < self.depth)
        self.depth[hit] = t[hit]
        self.color[hit] = color[hit] if np.ndim(color) == 3 else color
        self.label[hit] = label
        return hit


def _slab(c, lo, hi):
    """Ray/axis-aligned-box intersection for rays (dx, dy, 1) from the origin.
    Returns entry t and the axis of the entry face."""
    dirs = [c.dx, c.dy, np.ones_like(c.dx)]
    tmin = np.full(c.dx.shape, -np.inf)
    tmax = np.full(c.dx.shape, np.inf)
    axis = np.zeros(c.dx.shape, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            d = dirs[a]
            t1 = np.where(d != 0, lo[a] / d, -np.inf)
            t2 = np.where(d != 0, hi[a] / d, np.inf)
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            outside = (d == 0) & ((lo[a] > 0) | (hi[a] < 0))
            near = np.where(outside, np.inf, np.where(d == 0, -np.inf, near))
            far = np.where(outside, -np.inf, np.where(d == 0, np.inf, far))
            axis = np.where(near > tmin, a, axis)
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
    t = np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)
    return t, axis


def synth_scene(spec: SyntheticSceneSpec) -> SynthScene:
    """Render one scene; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    K = CameraIntrinsics(spec.focal, spec.focal, (w - 1) / 2, (h - 1) / 2)
    injected = sample_rare_injections(spec, rng)
    cam_h = rng.uniform(*spec.camera_height)
    zw = rng.uniform(*spec.wall_depth)
    half_w = rng.uniform(*spec.room_width) / 2
    room_h = rng.uniform(*spec.room_height)
    light = rng.uniform(*spec.brightness)
    hue = rng.random()
    wall_rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.05, 0.35), rng.uniform(0.55, 0.9)))
    floor_rgb = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.6)))
    tile = rng.uniform(0.4, 0.8)
    c = _Canvas(h, w, K)

    with np.errstate(divide="ignore", invalid="ignore"):
        # back wall, side walls, floor, ceiling
        c.paint(np.full((h, w), zw), wall_rgb * (0.95 - 0.1 * c.dy[..., None]), WALL)
        for sign in (-1.0, 1.0):
            t = np.where(c.dx * sign > 0, sign * half_w / c.dx, np.inf)
            c.paint(t, wall_rgb * 0.8, WALL)
        t_floor = np.where(c.dy > 0, cam_h / c.dy, np.inf)
        fx_w, fz_w = c.dx * t_floor, t_floor
        checker = ((np.floor(fx_w / tile) + np.floor(fz_w / tile)) % 2)[..., None]
        c.paint(t_floor, floor_rgb * (1.0 - 0.25 * checker), FLOOR)
        t_ceil = np.where(c.dy < 0, (cam_h - room_h) / c.dy, np.inf)
        c.paint(t_ceil, np.array([0.85, 0.85, 0.82]), CEILING)

    pal = spec.palette
    for label, base in ((BOX, pal.box_color), (BALL, pal.ball_color), (PILLAR, pal.pillar_color)):
        if rng.random() >= spec.common_probability:
            continue
        for _ in range(rng.integers(1, 3)):
            col = np.clip(np.asarray(base) * rng.uniform(0.8, 1.2, 3), 0, 1)
            z0 = rng.uniform(1.5, zw - 0.6)
            x0 = rng.uniform(-half_w + 0.4, half_w - 0.4)
            if label == BOX:
                sx, sy, sz = rng.uniform(0.3, 1.0, 3)
                t, axis = _slab(c, (x0 - sx / 2, cam_h - sy, z0), (x0 + sx / 2, cam_h, z0 + sz))
                shade = np.choose(axis, [0.75, 0.9, 1.0])[..., None]
                c.paint(t, col * shade, BOX)
            elif label == BALL:
                r = rng.uniform(0.15, 0.45)
                t, normal = _sphere(c, np.array([x0, cam_h - r, z0]), r)
                lam = np.clip(normal @ np.array([-0.4, -0.7, -0.6]), 0, 1)
                c.paint(t, col * (0.45 + 0.55 * lam)[..., None], BALL)
            else:
                r = rng.uniform(0.1, 0.3)
                height = rng.uniform(1.0, 2.2)
                t, nx = _cylinder(c, x0, z0, r, cam_h - height, cam_h)
                c.paint(t, col * (0.7 + 0.3 * np.abs(nx))[..., None], PILLAR)

    for rc in pal.rare:
        if rc.label not in injected:
            continue
        z = rc.depth * (1 + rng.uniform(-spec.depth_jitter, spec.depth_jitter))
        half = rc.size / 2
        margin = rc.size * K.fx / z / 2 + 2
        # objects wider than a tiny frame are centered instead
        mu, mv = min(margin, (w - 1) / 2), min(margin, (h - 1) / 2)
        u0 = rng.uniform(mu, w - 1 - mu)
        v0 = rng.uniform(mv, h - 1 - mv)
        x0, y0 = (u0 - K.cx) * z / K.fx, (v0 - K.cy) * z / K.fy
        t, axis = _slab(c, (x0 - half, y0 - half, z), (x0 + half, y0 + half, z + rc.size))
        tf = np.where(np.isfinite(t), t, 0.0)
        g = rc.pattern.shape[0]
        ci = np.clip(((c.dy * tf - (y0 - half)) / rc.size * g).astype(int), 0, g - 1)
        cj = np.clip(((c.dx * tf - (x0 - half)) / rc.size * g).astype(int), 0, g - 1)
        face = np.where(rc.pattern[ci, cj][..., None], rc.colors[0], rc.colors[1])
        side = np.where(axis[..., None] == 2, 1.0, 0.7)
        c.paint(t, face * side * rng.uniform(0.92, 1.0), rc.label)

    color = c.color.copy()
    rare_px = c.label >= FIRST_RARE
    color[~rare_px] *= light
    color = np.clip(color + rng.normal(0, spec.pixel_noise, color.shape), 0.0, 1.0)
    depth = DepthMap(c.depth, np.isfinite(c.depth))
    return SynthScene(color, depth, K, c.label, injected)


def _sphere(c, center, r):
    dirs = np.stack([c.dx, c.dy, np.ones_like(c.dx)], axis=-1)
    a = np.sum(dirs**2, axis=-1)
    b = -2 * dirs @ center
    cc = center @ center - r * r
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    t = np.where(disc >= 0, t, np.inf)
    normal = (dirs * np.where(np.isfinite(t), t, 0)[..., None] - center) / r
    return t, normal


def _cylinder(c, x0, z0, r, y_top, y_bottom):
    a = c.dx**2 + 1
    b = -2 * (c.dx * x0 + z0)
    cc = x0**2 + z0**2 - r * r
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    y = c.dy * t
    t = np.where((disc >= 0) & (y >= y_top) & (y <= y_bottom), t, np.inf)
    nx = np.where(np.isfinite(t), (c.dx * t - x0) / r, 0.0)
    return t, nx


def generate_corpus(world_seed: int, count: int, seed_offset: int = 0, palette_kw: dict | None = None,
                    **spec_kw) -> tuple[Palette, list[SynthScene]]:
    palette = make_palette(world_seed, **(palette_kw or {}))
    scenes = [synth_scene(SyntheticSceneSpec(seed=world_seed * 1_000_003 + seed_offset + i, palette=palette, **spec_kw))
              for i in range(count)]
    return palette, scenes
