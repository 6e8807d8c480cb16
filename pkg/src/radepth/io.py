"""File formats: RGB and label PNGs, depth as 16-bit PNG or PFM, the dataset
manifest and false-color previews.

Depth PNGs store millimeters in 16 bits with 0 meaning invalid. PFM files are
little-endian single-channel float (negative scale in the header) with rows
stored bottom to top; non-positive or non-finite values read back as invalid.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics
from .structures import DepthMap, InputError, check_image

SPLITS = ("train", "pool", "test")
DEPTH_FORMATS = ("png16", "pfm")
PNG16_MAX_M = 65.535

# Turbo-style ramp: value in [0, 1] -> RGB, piecewise linear between these stops.
TURBO_STOPS = np.array([
    [48, 18, 59],
    [70, 107, 227],
    [40, 188, 235],
    [50, 242, 152],
    [164, 252, 60],
    [238, 207, 58],
    [251, 126, 33],
    [208, 47, 5],
    [122, 4, 3],
], dtype=np.float64)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------


def write_image(path, image) -> None:
    image = check_image(image)
    Image.fromarray(np.round(image * 255).astype(np.uint8), "RGB").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_depth_png16(path, depth: DepthMap) -> None:
    """Millimeters, rounded; depths beyond 65.535 m cannot be stored."""
    v = depth.values[depth.valid]
    if v.size and v.max() > PNG16_MAX_M:
        raise InputError(f"depth {v.max():.3f} m exceeds the 16-bit millimeter range")
    mm = np.zeros(depth.shape, np.uint16)
    mm[depth.valid] = np.maximum(np.round(v * 1000), 1).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png16(path) -> DepthMap:
    with Image.open(path) as im:
        mm = np.asarray(im, dtype=np.int64)
    if mm.ndim != 2:
        raise InputError(f"{path}: depth PNG must be single channel")
    return DepthMap(mm / 1000.0, mm > 0)


def write_pfm(path, depth: DepthMap) -> None:
    h, w = depth.shape
    data = np.where(depth.valid, depth.values, 0.0).astype("<f4")[::-1]
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pfm(path) -> DepthMap:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise InputError(f"{path}: not a PFM file")
    if m.group(1) != b"Pf":
        raise InputError(f"{path}: color PFM is not a depth map")
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    if len(body) != w * h * 4:
        raise InputError(f"{path}: expected {w * h * 4} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype).reshape(h, w)[::-1].astype(np.float64)
    valid = np.isfinite(values) & (values > 0)
    return DepthMap(np.where(valid, values, 0.0), valid)


def write_depth(path, depth: DepthMap, fmt: str | None = None) -> None:
    fmt = fmt or _depth_format(path)
    (write_pfm if fmt == "pfm" else write_depth_png16)(path, depth)


def read_depth(path, fmt: str | None = None) -> DepthMap:
    fmt = fmt or _depth_format(path)
    return read_pfm(path) if fmt == "pfm" else read_depth_png16(path)


def _depth_format(path) -> str:
    return "pfm" if str(path).lower().endswith(".pfm") else "png16"


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise InputError("label maps must be 2-D with values in [0, 65535]")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise InputError(f"{path}: label PNG must be single channel")
    return arr.astype(np.int64)


# ---------------------------------------------------------------------------
# false color
# ---------------------------------------------------------------------------


def turbo(values) -> np.ndarray:
    """Map values in [0, 1] (clipped) to uint8 RGB through ``TURBO_STOPS``."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0, 1) * (len(TURBO_STOPS) - 1)
    lo = np.minimum(np.floor(x).astype(np.int64), len(TURBO_STOPS) - 2)
    f = (x - lo)[..., None]
    rgb = TURBO_STOPS[lo] * (1 - f) + TURBO_STOPS[lo + 1] * f
    return np.round(rgb).astype(np.uint8)


def false_color(values, valid=None, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Normalize to ``[vmin, vmax]`` (defaults: valid range) and apply the ramp.
    Invalid pixels are black."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values) if valid is None else np.asarray(valid, bool) & np.isfinite(values)
    if valid.any():
        vmin = float(values[valid].min()) if vmin is None else vmin
        vmax = float(values[valid].max()) if vmax is None else vmax
    else:
        vmin, vmax = 0.0, 1.0
    span = vmax - vmin if vmax > vmin else 1.0
    rgb = turbo(np.where(valid, (values - vmin) / span, 0.0))
    rgb[~valid] = 0
    return rgb


def write_false_color(path, values, valid=None, vmin=None, vmax=None) -> None:
    Image.fromarray(false_color(values, valid, vmin, vmax), "RGB").save(path)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    image: str
    depth: str
    intrinsics: dict
    scene_id: int
    segments: str | None = None
    classes: str | None = None

    @property
    def K(self) -> CameraIntrinsics:
        return CameraIntrinsics(**{k: float(self.intrinsics[k]) for k in ("fx", "fy", "cx", "cy")})


@dataclass
class LoadedEntry:
    image: np.ndarray
    depth: DepthMap
    K: CameraIntrinsics
    scene_id: int
    segments: np.ndarray | None
    classes: np.ndarray | None


@dataclass
class DatasetManifest:
    """A split of RGB-D samples. Relative paths resolve against ``root``,
    which defaults to the manifest file's directory."""

    split: str
    entries: list[ManifestEntry]
    depth_format: str = "png16"
    max_depth: float = 10.0
    resolution: tuple = (64, 64)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.depth_format not in DEPTH_FORMATS:
            raise InputError(f"depth format must be one of {DEPTH_FORMATS}")
        self.resolution = tuple(int(r) for r in self.resolution)
        self.entries = [e if isinstance(e, ManifestEntry) else ManifestEntry(**e) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def check_paths(self) -> None:
        for i, e in enumerate(self.entries):
            for rel in (e.image, e.depth, e.segments, e.classes):
                if rel is not None and not self.path(rel).is_file():
                    raise InputError(f"entry {i}: {rel} does not exist")

    def load(self, i: int) -> LoadedEntry:
        e = self.entries[i]
        return LoadedEntry(
            read_image(self.path(e.image)),
            read_depth(self.path(e.depth), self.depth_format),
            e.K,
            int(e.scene_id),
            read_labels(self.path(e.segments)) if e.segments else None,
            read_labels(self.path(e.classes)) if e.classes else None,
        )

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "depth_format": self.depth_format,
            "max_depth": self.max_depth,
            "resolution": list(self.resolution),
            "entries": [asdict(e) for e in self.entries],
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1))


def load_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    missing = {"split", "entries"} - set(data)
    if missing:
        raise InputError(f"{path}: missing keys {sorted(missing)}")
    m = DatasetManifest(root=path.parent, **data)
    if check:
        m.check_paths()
    return m


def write_sample(root, stem: str, image, depth: DepthMap, K: CameraIntrinsics, scene_id: int,
                 depth_format: str = "png16", classes=None, segments=None) -> ManifestEntry:
    """Write one sample's files under ``root`` and return its manifest entry
    with paths relative to ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ext = "pfm" if depth_format == "pfm" else "png"
    entry = ManifestEntry(f"{stem}_rgb.png", f"{stem}_depth.{ext}",
                          {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy}, int(scene_id))
    write_image(root / entry.image, image)
    write_depth(root / entry.depth, depth, depth_format)
    if classes is not None:
        entry.classes = f"{stem}_class.png"
        write_labels(root / entry.classes, classes)
    if segments is not None:
        entry.segments = f"{stem}_seg.png"
        write_labels(root / entry.segments, segments)
    return entry
