"""The ``rad`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .benchmark import BenchmarkConfig, run_benchmark
from .checkpoint import load_checkpoint, load_config, save_checkpoint
from .correspondence import MatchConfig, match_desk, save_matches
from .geometry import PoseBounds, make_context_3d, sample_pose
from .metrics import compute_class_stats, select_underrepresented
from .network import DualStreamNet, NetConfig, NetworkDepthModel
from .pipeline import InferenceStores, retrieved_context, run_inference
from .retrieval import (
    RetrievalConfig,
    build_index,
    compute_descriptor,
    knn_query,
    load_index,
    save_index,
)
from .structures import ContextSample, InputError
from .synth import generate_corpus
from .training import TrainPlan, TrainSample, train_staged
from .uncertainty import NoiseConfig, SegmentMap, keep_segments, segment_desk, uncertainty_map

log = logging.getLogger("rad")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _pool_store(manifest: io.DatasetManifest) -> dict[int, ContextSample]:
    out = {}
    for i in range(len(manifest)):
        e = manifest.load(i)
        out[i] = ContextSample(e.image, e.depth, e.scene_id, "retrieved", i)
    return out


def _stores(args, frozen_net: DualStreamNet) -> InferenceStores:
    pool_manifest = io.load_manifest(args.pool)
    index = load_index(args.index)
    retrieval = RetrievalConfig(M=args.M, noise=NoiseConfig(args.sigma, args.n), h=args.h, q=args.q)
    return InferenceStores(NetworkDepthModel(frozen_net), index, _pool_store(pool_manifest), retrieval)


def _frozen(args, net: DualStreamNet) -> DualStreamNet:
    return load_checkpoint(args.frozen) if getattr(args, "frozen", None) else net


def _rare_classes(args) -> list[int] | None:
    if getattr(args, "rare_classes", None):
        data = json.loads(Path(args.rare_classes).read_text())
        return sorted(int(c) for c in (data["rare_classes"] if isinstance(data, dict) else data))
    return None


def _dump(obj) -> None:
    print(json.dumps(obj, indent=1, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return sorted(o)
    return str(o)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    palette_kw = json.loads(args.palette) if args.palette else {}
    scene_kw = json.loads(args.scene) if args.scene else {}
    _, scenes = generate_corpus(args.seed, args.train + args.test, palette_kw=palette_kw,
                                size=(args.size, args.size), **scene_kw)
    for split, lo, hi in (("train", 0, args.train), ("test", args.train, args.train + args.test)):
        entries = [io.write_sample(out / split, f"{i:05d}", s.image, s.depth, s.K, i, args.depth_format,
                                   classes=s.class_map)
                   for i, s in zip(range(lo, hi), scenes[lo:hi])]
        m = io.DatasetManifest(split, entries, args.depth_format, resolution=(args.size, args.size))
        io.save_manifest(m, out / split / "manifest.json")
    stats = compute_class_stats(s.class_map for s in scenes[: args.train])
    rare = sorted(select_underrepresented(stats))
    (out / "rare_classes.json").write_text(json.dumps({"rare_classes": rare}))
    print(f"wrote {args.train} train and {args.test} test scenes to {out}; rare classes {rare}")
    return 0


def cmd_ingest(args) -> int:
    m = io.load_manifest(args.manifest)
    shapes, depth_counts, class_maps = set(), [], []
    for i in range(len(m)):
        e = m.load(i)
        if e.image.shape[:2] != e.depth.shape:
            raise InputError(f"entry {i}: image and depth differ in size")
        shapes.add(e.depth.shape)
        depth_counts.append(int(e.depth.valid.sum()))
        if e.classes is not None:
            class_maps.append(e.classes)
    summary = {"split": m.split, "entries": len(m), "shapes": sorted(shapes), "valid_depth_pixels": sum(depth_counts),
               "scenes": len({e.scene_id for e in m.entries})}
    if class_maps and m.split != "test":
        stats = compute_class_stats(class_maps)
        rare = sorted(select_underrepresented(stats, args.freq_cap, args.min_occurrences))
        summary["rare_classes"] = rare
        if args.class_stats:
            Path(args.class_stats).write_text(json.dumps({
                "rare_classes": rare,
                "image_frequency": {str(k): v for k, v in sorted(stats.image_frequency.items())},
                "occurrence_count": {str(k): v for k, v in sorted(stats.occurrence_count.items())},
            }, indent=1))
    if args.convert:
        out = Path(args.convert)
        entries = []
        for i, e in enumerate(m.entries):
            s = m.load(i)
            new = io.write_sample(out.parent, Path(e.image).stem.removesuffix("_rgb"), s.image, s.depth, s.K,
                                  s.scene_id, args.depth_format, classes=s.classes, segments=s.segments)
            entries.append(new)
        io.save_manifest(io.DatasetManifest(m.split, entries, args.depth_format, m.max_depth, m.resolution), out)
        summary["converted"] = str(out)
    _dump(summary)
    return 0


def cmd_index(args) -> int:
    if args.action == "build":
        m = io.load_manifest(args.manifest)
        if m.split == "test":
            raise InputError("test samples may not enter the retrieval index")
        index = build_index((i, e.scene_id, io.read_image(m.path(e.image))) for i, e in enumerate(m.entries))
        save_index(index, args.out)
        print(f"indexed {len(index)} samples ({len(index.skipped)} skipped) into {args.out}")
        return 0
    index = load_index(args.index)
    image = io.read_image(args.image)
    if args.segments:
        seg = SegmentMap.from_labels(io.read_labels(args.segments))
        from .uncertainty import mask_image

        image = mask_image(image, seg, set(args.keep))
    res = knn_query(index, compute_descriptor(image), args.M, args.exclude_scene)
    _dump({"ids": res.ids, "similarities": res.similarities, "status": res.status})
    return 0


def cmd_uncertainty(args) -> int:
    net = load_checkpoint(args.checkpoint)
    image = io.read_image(args.image)
    rng = np.random.default_rng(args.seed)
    U = uncertainty_map(NetworkDepthModel(net), image, NoiseConfig(args.sigma, args.n), rng)
    seg = SegmentMap.from_labels(io.read_labels(args.segments)) if args.segments else segment_desk(image)
    kept = keep_segments(U, seg, args.h, args.q)
    if args.out:
        np.save(args.out, np.where(U.valid, U.values, np.nan))
    if args.png:
        io.write_false_color(args.png, U.values, U.valid, 0.0, None)
    _dump({"mean": float(U.values[U.valid].mean()), "max": float(U.values[U.valid].max()),
           "num_segments": seg.num_segments, "kept_segments": sorted(kept)})
    return 0


def cmd_match(args) -> int:
    a, b = io.read_image(args.image_a), io.read_image(args.image_b)
    cfg = MatchConfig(ratio=args.ratio)
    matches = match_desk(a, b, cfg)
    save_matches(matches, args.out)
    print(f"{len(matches)} matches written to {args.out}")
    return 0


def cmd_augment3d(args) -> int:
    m = io.load_manifest(args.manifest)
    e = m.load(args.entry)
    rng = np.random.default_rng(args.seed)
    bounds = PoseBounds.for_depth(e.depth, args.max_angle, args.translation_fraction)
    pose = sample_pose(rng, bounds)
    sample, corr = make_context_3d(e.image, e.depth, e.K, pose, args.splat_radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_image(out / "context_rgb.png", sample.image)
    io.write_depth(out / f"context_depth.{'pfm' if args.depth_format == 'pfm' else 'png'}", sample.depth,
                   args.depth_format)
    save_matches(corr, out / "matches.json")
    (out / "pose.json").write_text(json.dumps({"R": pose.R.tolist(), "t": pose.t.tolist()}))
    print(f"rendered context with {len(corr)} correspondences into {out}")
    return 0


def _retrieval_source(args, net, plan):
    """Retrieved context per training sample, computed once and reused."""
    if not (args.index and args.pool):
        raise InputError("stage 4 needs --index and --pool")
    stores = _stores(args, _frozen(args, net))
    rng = np.random.default_rng(args.seed + 100)
    cache = {}

    def source(s):
        if s.sample_id not in cache:
            cache[s.sample_id] = retrieved_context(s.image, stores, net.cfg, plan.M, rng, scene_id=s.scene_id)
        return cache[s.sample_id]

    return source


def cmd_train(args) -> int:
    m = io.load_manifest(args.manifest)
    conf = load_config(args.config) if args.config else {}
    plan_kw = dict(conf.get(f"stage{args.stage}", {}))
    if args.epochs is not None:
        plan_kw["epochs"] = args.epochs
    if args.lr is not None:
        plan_kw["lr"] = {args.stage: args.lr}
    if "lr" in plan_kw:
        lr = plan_kw["lr"]
        plan_kw["lr"] = {int(k): float(v) for k, v in lr.items()} if isinstance(lr, dict) else {args.stage: float(lr)}
    plan = TrainPlan(stage=args.stage, seed=args.seed, **plan_kw)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.stage == 1:
        net = DualStreamNet(NetConfig(**conf.get("net", {})), seed=args.seed)
        save_checkpoint(net, out / "stage1.radw")
        print(f"initialized {out / 'stage1.radw'}")
        return 0
    if not args.checkpoint:
        raise InputError(f"stage {args.stage} needs --checkpoint from stage {args.stage - 1}")
    net = load_checkpoint(args.checkpoint)
    samples = []
    for i in range(len(m)):
        e = m.load(i)
        samples.append(TrainSample(e.image, e.depth, e.K, e.scene_id, i))

    source = _retrieval_source(args, net, plan) if args.stage == 4 else None
    net, tlog = train_staged(plan, samples, net, source, out)
    final = out / f"stage{args.stage}.radw"
    save_checkpoint(net, final)
    _dump({"checkpoint": str(final), "epoch_losses": tlog.epoch_losses, "sources": tlog.source_counts})
    return 0


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    image = io.read_image(args.image)
    stores = _stores(args, _frozen(args, net)) if args.M > 0 else None
    seg = SegmentMap.from_labels(io.read_labels(args.segments)) if args.segments else None
    depth, diag = run_inference(image, stores, net, args.M, np.random.default_rng(args.seed),
                                scene_id=args.scene_id, segments=seg)
    io.write_depth(args.out, depth)
    if args.png:
        io.write_false_color(args.png, depth.values, depth.valid)
    _dump(diag)
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    test = io.load_manifest(args.test)
    pool = io.load_manifest(args.pool) if args.pool else None
    stores = _stores(args, _frozen(args, net)) if args.pool and args.index else None
    protocols = tuple(args.protocols.split(","))
    cfg = BenchmarkConfig(M=args.M, seed=args.seed, protocols=protocols, rare_classes=_rare_classes(args),
                          rows=tuple(args.rows.split(",")), preview_images=args.previews)
    report = run_benchmark(test, net, stores, cfg, args.out_dir, pool)
    print(Path(report.files["csv"]).read_text(), end="")
    return 0


def cmd_report(args) -> int:
    data = json.loads((Path(args.run_dir) / "report.json").read_text())
    rows = [r for r in data["aggregate"] if not r.get("empty")]
    head = f"{'row':14s} {'protocol':17s} {'d1':>7s} {'d2':>7s} {'d3':>7s} {'AbsRel':>7s} {'RMS':>7s} " \
           f"{'RMSlog':>7s} {'log10':>7s}"
    print(head)
    for r in rows:
        print(f"{r['row']:14s} {r['protocol']:17s} " + " ".join(
            f"{r[k]:7.4f}" for k in ("delta1", "delta2", "delta3", "abs_rel", "rms", "rms_log", "log10")))
    base = {r["protocol"]: r["abs_rel"] for r in rows if r["row"] == "no_retrieval"}
    for r in rows:
        if r["row"] != "no_retrieval" and r["protocol"] in base and base[r["protocol"]] > 0:
            change = 100 * (r["abs_rel"] / base[r["protocol"]] - 1)
            print(f"{r['row']} {r['protocol']}: AbsRel {change:+.1f}% vs no_retrieval")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _retrieval_args(p):
    p.add_argument("--index", required=False, help="descriptor file from `rad index build`")
    p.add_argument("--pool", required=False, help="manifest of the retrieval pool")
    p.add_argument("--frozen", help="checkpoint used for uncertainty (default: the main checkpoint)")
    p.add_argument("-M", type=int, default=4, help="context samples per input")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--q", type=float, default=20.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rad", description="Retrieval-augmented monocular depth at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth-format", choices=io.DEPTH_FORMATS, default="png16")
    p.add_argument("--palette", help="JSON keyword arguments for the rare-class palette")
    p.add_argument("--scene", help="JSON keyword arguments for each scene spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a manifest, compute class statistics, convert depth format")
    p.add_argument("manifest")
    p.add_argument("--class-stats", help="write class statistics and rare classes to this JSON file")
    p.add_argument("--freq-cap", type=float, default=0.10)
    p.add_argument("--min-occurrences", type=int, default=5)
    p.add_argument("--convert", help="write a copy of the dataset with this manifest path")
    p.add_argument("--depth-format", choices=io.DEPTH_FORMATS, default="png16")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build or query the descriptor index")
    isub = p.add_subparsers(dest="action", required=True)
    b = isub.add_parser("build")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    q = isub.add_parser("query")
    q.add_argument("--index", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("-M", type=int, default=4)
    q.add_argument("--exclude-scene", type=int)
    q.add_argument("--segments", help="label PNG; with --keep, query on the masked image")
    q.add_argument("--keep", type=int, nargs="*", default=[])
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("uncertainty", help="pixel-wise uncertainty and kept segments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--segments")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--q", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=".npy of U (NaN where invalid)")
    p.add_argument("--png", help="false-color PNG of U")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("match", help="desk matcher between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("augment3d", help="render a manifest entry from a random nearby pose")
    p.add_argument("--manifest", required=True)
    p.add_argument("--entry", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-angle", type=float, default=10.0)
    p.add_argument("--translation-fraction", type=float, default=0.05)
    p.add_argument("--splat-radius", type=int, default=1)
    p.add_argument("--depth-format", choices=io.DEPTH_FORMATS, default="png16")
    p.set_defaults(func=cmd_augment3d)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3, 4))
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--checkpoint", help="checkpoint of the previous stage")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="TOML with [net], [stage2] and [stage4] tables")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    _retrieval_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict depth for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="depth file (.png for 16-bit mm, .pfm)")
    p.add_argument("--png", help="false-color preview")
    p.add_argument("--segments")
    p.add_argument("--scene-id", type=int, help="scene excluded from retrieval")
    p.add_argument("--seed", type=int, default=0)
    _retrieval_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="benchmark a checkpoint on a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rare-classes", help="JSON from `rad synth` or `rad ingest --class-stats`")
    p.add_argument("--protocols", default="underrepresented,all")
    p.add_argument("--rows", default="rad,no_retrieval,full_context,global_knn")
    p.add_argument("--previews", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    _retrieval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print the aggregate table of an eval run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"rad: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
