"""Benchmark a checkpoint on a test manifest under both evaluation protocols.

Rows:

- ``rad``: uncertainty-aware retrieval, matched cross-attention
- ``no_retrieval``: the same network with ``M = 0``
- ``full_context``: the rad contexts with every input token attending to
  every context token
- ``global_knn``: retrieval on the unmasked image

Protocols are ``underrepresented`` (pixels of the rare classes only) and
``all``. Every row's predictions are written as PFM so that the reported
numbers can be recomputed from disk.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import DatasetManifest, read_pfm, write_false_color, write_pfm
from .metrics import (
    METRIC_NAMES,
    MetricsAccumulator,
    MetricsReport,
    accumulate,
    class_mask,
    mean_of_reports,
)
from .network import DualStreamNet
from .pipeline import InferenceStores, predict, retrieved_context
from .structures import DepthMap, InputError

ROWS = ("rad", "no_retrieval", "full_context", "global_knn")
PROTOCOLS = ("underrepresented", "all")
CSV_COLUMNS = ("row", "protocol", *METRIC_NAMES, "pixel_count", "per_image_abs_rel", "images")


class BenchmarkConfigError(InputError):
    pass


@dataclass
class BenchmarkConfig:
    M: int = 4
    seed: int = 0
    rows: tuple = ROWS
    protocols: tuple = PROTOCOLS
    rare_classes: tuple | None = None
    min_depth: float | None = None
    max_depth: float | None = None
    preview_images: int = 4

    def __post_init__(self):
        bad = set(self.rows) - set(ROWS)
        if bad:
            raise BenchmarkConfigError(f"unknown rows {sorted(bad)}")
        bad = set(self.protocols) - set(PROTOCOLS)
        if bad:
            raise BenchmarkConfigError(f"unknown protocols {sorted(bad)}")


@dataclass
class BenchmarkReport:
    aggregate: dict  # (row, protocol) -> MetricsReport, pixel-weighted
    per_image_mean: dict  # (row, protocol) -> MetricsReport
    records: list[dict] = field(default_factory=list)
    files: dict = field(default_factory=dict)


def check_pool_hygiene(test: DatasetManifest, pool: DatasetManifest | None) -> None:
    """Test samples may never be retrieval candidates."""
    if test.split != "test":
        raise BenchmarkConfigError(f"benchmark manifest has split {test.split!r}, expected 'test'")
    if pool is None:
        return
    if pool.split == "test":
        raise BenchmarkConfigError("the retrieval pool cannot be a test split")
    test_files = {test.path(e.image).resolve() for e in test.entries}
    leaked = [e.image for e in pool.entries if pool.path(e.image).resolve() in test_files]
    if leaked:
        raise BenchmarkConfigError(f"{len(leaked)} test images are in the pool, e.g. {leaked[0]}")


def _score(pred: DepthMap, gt: DepthMap, mask, cfg: BenchmarkConfig) -> MetricsAccumulator:
    return accumulate(pred, gt, mask, cfg.min_depth, cfg.max_depth)


def _as_stored(depth: DepthMap) -> DepthMap:
    # scores are computed on the float32 values that go to disk
    return DepthMap(depth.values.astype(np.float32).astype(np.float64), depth.valid)


def evaluate_predictions(preds: dict, gts: list[DepthMap], class_maps: list, cfg: BenchmarkConfig):
    """Score ``{row: [DepthMap]}`` under the configured protocols.

    Returns ``(aggregate, per_image_mean, records)``.
    """
    aggregate, per_image, records = {}, {}, []
    for row, ps in preds.items():
        for proto in cfg.protocols:
            total = MetricsAccumulator()
            reports = []
            for i, (p, g) in enumerate(zip(ps, gts)):
                mask = None if proto == "all" else class_mask(class_maps[i], cfg.rare_classes)
                acc = _score(p, g, mask, cfg)
                rep = acc.report() if acc.n else MetricsReport(empty=True)
                total = total.merge(acc)
                reports.append(rep)
                records.append({"image": i, "row": row, "mask": proto, **rep.as_dict()})
            aggregate[row, proto] = total.report() if total.n else MetricsReport(empty=True)
            per_image[row, proto] = mean_of_reports(reports)
    return aggregate, per_image, records


def run_benchmark(test: DatasetManifest, net: DualStreamNet, stores: InferenceStores | None,
                  cfg: BenchmarkConfig | None = None, out_dir=None, pool: DatasetManifest | None = None,
                  scene_offset: int = 0) -> BenchmarkReport:
    """Predict every test image for each row, score both protocols and,
    when ``out_dir`` is given, write the JSON and CSV reports, per-row PFM
    predictions and false-color previews.

    ``scene_offset`` is added to test scene ids before same-scene exclusion,
    for pools whose scene ids live in a shifted range.
    """
    cfg = cfg or BenchmarkConfig()
    if len(test) == 0:
        raise BenchmarkConfigError("test split is empty")
    check_pool_hygiene(test, pool)
    needs_pool = any(r != "no_retrieval" for r in cfg.rows) and cfg.M > 0
    if needs_pool and stores is None:
        raise BenchmarkConfigError("retrieval rows need an index and pool")
    samples = [test.load(i) for i in range(len(test))]
    if "underrepresented" in cfg.protocols:
        if any(s.classes is None for s in samples):
            raise BenchmarkConfigError("the underrepresented protocol needs a class map for every test image")
        if cfg.rare_classes is None:
            raise BenchmarkConfigError("the underrepresented protocol needs the rare class set")

    images = [s.image for s in samples]
    bundles, umaps = {}, []
    if needs_pool:
        for kind, use_u in (("rad", True), ("global_knn", False)):
            if kind not in cfg.rows and not (kind == "rad" and "full_context" in cfg.rows):
                continue
            bs = []
            for i, s in enumerate(samples):
                rng = np.random.default_rng([cfg.seed, i])
                seg = None if s.segments is None else _segments(s.segments)
                b = retrieved_context(s.image, stores, net.cfg, cfg.M, rng, scene_id=s.scene_id + scene_offset,
                                      segments=seg, use_uncertainty=use_u)
                if kind == "rad":
                    umaps.append(b.diagnostics.get("uncertainty_map"))
                bs.append(b)
            bundles[kind] = bs

    preds = {}
    for row in cfg.rows:
        if row == "no_retrieval" or cfg.M == 0:
            out = predict(net, images)
        elif row == "full_context":
            out = predict(net, images, bundles["rad"], full_context=True)
        else:
            out = predict(net, images, bundles[row])
        preds[row] = [_as_stored(p) for p in out]

    gts = [s.depth for s in samples]
    classes = [s.classes for s in samples]
    aggregate, per_image, records = evaluate_predictions(preds, gts, classes, cfg)
    report = BenchmarkReport(aggregate, per_image, records)
    if out_dir is not None:
        report.files = _write(Path(out_dir), report, preds, gts, umaps, bundles, cfg)
    return report


def _segments(labels):
    from .uncertainty import SegmentMap

    return SegmentMap.from_labels(labels)


def _write(out: Path, report: BenchmarkReport, preds, gts, umaps, bundles, cfg) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    files = {"json": str(out / "report.json"), "csv": str(out / "report.csv")}
    for row, ps in preds.items():
        d = out / "predictions" / row
        d.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(ps):
            write_pfm(d / f"{i:05d}.pfm", p)
    retrieved = [b.diagnostics.get("retrieved_ids", []) for b in bundles.get("rad", [])]
    (out / "report.json").write_text(json.dumps(report_json(report, cfg, retrieved), indent=1))
    write_csv(report, out / "report.csv")

    prev = out / "preview"
    prev.mkdir(exist_ok=True)
    for i in range(min(cfg.preview_images, len(gts))):
        g = gts[i]
        lo, hi = (float(g.values[g.valid].min()), float(g.values[g.valid].max())) if g.valid.any() else (0, 1)
        write_false_color(prev / f"{i:05d}_gt.png", g.values, g.valid, lo, hi)
        for row, ps in preds.items():
            write_false_color(prev / f"{i:05d}_{row}.png", ps[i].values, ps[i].valid, lo, hi)
        if i < len(umaps) and umaps[i] is not None:
            write_false_color(prev / f"{i:05d}_uncertainty.png", umaps[i].values, umaps[i].valid, 0.0, None)
    files["predictions"] = str(out / "predictions")
    files["preview"] = str(prev)
    return files


def report_json(report: BenchmarkReport, cfg: BenchmarkConfig, retrieved=()) -> dict:
    return {
        "config": {"M": cfg.M, "seed": cfg.seed, "rows": list(cfg.rows), "protocols": list(cfg.protocols),
                   "rare_classes": None if cfg.rare_classes is None else sorted(int(c) for c in cfg.rare_classes),
                   "min_depth": cfg.min_depth, "max_depth": cfg.max_depth,
                   # indoor tables quote log10, outdoor ones rms_log; both are always present
                   "table_columns": {"indoor": "log10", "outdoor": "rms_log"}},
        "images": report.records,
        "aggregate": [{"row": r, "protocol": p, "weighting": "pixel", **m.as_dict()}
                      for (r, p), m in report.aggregate.items()],
        "per_image_mean": [{"row": r, "protocol": p, "weighting": "image", **m.as_dict()}
                           for (r, p), m in report.per_image_mean.items()],
        "retrieved_ids": [list(map(int, ids)) for ids in retrieved],
    }


def write_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for (row, proto), m in report.aggregate.items():
            per = report.per_image_mean[row, proto]
            images = sum(1 for r in report.records if r["row"] == row and r["mask"] == proto and not r["empty"])
            w.writerow([row, proto, *(f"{getattr(m, k):.6f}" for k in METRIC_NAMES), m.pixel_count,
                        f"{per.abs_rel:.6f}", images])


def recompute_from_disk(out_dir, test: DatasetManifest, cfg: BenchmarkConfig):
    """Independent recomputation of the aggregate block from stored predictions."""
    out_dir = Path(out_dir)
    samples = [test.load(i) for i in range(len(test))]
    preds = {row: [read_pfm(out_dir / "predictions" / row / f"{i:05d}.pfm") for i in range(len(samples))]
             for row in cfg.rows}
    agg, _, _ = evaluate_predictions(preds, [s.depth for s in samples], [s.classes for s in samples], cfg)
    return agg
