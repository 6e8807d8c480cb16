import csv
import json

import numpy as np
import pytest

from radepth import io
from radepth.benchmark import (
    CSV_COLUMNS,
    BenchmarkConfig,
    BenchmarkConfigError,
    check_pool_hygiene,
    run_benchmark,
)
from radepth.metrics import depth_metrics
from radepth.network import NetworkDepthModel
from radepth.pipeline import InferenceStores, predict
from radepth.retrieval import RetrievalConfig, build_index
from radepth.structures import ContextSample
from radepth.synth import FIRST_RARE, generate_corpus


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    _, scenes = generate_corpus(4, 30, size=(16, 16), rare_probability=0.5)
    manifests = {}
    for split, rng_ in (("pool", range(0, 24)), ("test", range(24, 30))):
        d = root / split
        entries = [io.write_sample(d, f"{i:05d}", scenes[i].image, scenes[i].depth, scenes[i].K, i, "pfm",
                                   classes=scenes[i].class_map) for i in rng_]
        m = io.DatasetManifest(split, entries, "pfm", resolution=(16, 16))
        io.save_manifest(m, d / "manifest.json")
        manifests[split] = io.load_manifest(d / "manifest.json")
    rare = sorted({int(c) for s in scenes for c in np.unique(s.class_map) if c >= FIRST_RARE})
    return manifests, rare


@pytest.fixture
def stores(dataset, tiny_net):
    pool = dataset[0]["pool"]
    samples = {i: ContextSample(e.image, e.depth, e.scene_id, "retrieved", i)
               for i, e in enumerate(pool.load(k) for k in range(len(pool)))}
    index = build_index((i, s.scene_id, s.image) for i, s in samples.items())
    return InferenceStores(NetworkDepthModel(tiny_net), index, samples, RetrievalConfig(h=0.0))


def test_report_recomputes_from_disk(dataset, stores, tiny_net, tmp_path):
    m, rare = dataset
    cfg = BenchmarkConfig(M=2, rare_classes=tuple(rare))
    run_benchmark(m["test"], tiny_net, stores, cfg, tmp_path, pool=m["pool"])
    rep = json.loads((tmp_path / "report.json").read_text())
    samples = [m["test"].load(i) for i in range(len(m["test"]))]
    for agg in rep["aggregate"]:
        ratios, sq, logs = [], [], []
        for i, s in enumerate(samples):
            pred = io.read_pfm(tmp_path / "predictions" / agg["row"] / f"{i:05d}.pfm").values
            sel = s.depth.valid.copy()
            if agg["protocol"] == "underrepresented":
                sel &= np.isin(s.classes, rare)
            p, g = pred[sel], s.depth.values[sel]
            ratios.append(np.abs(p - g) / g)
            sq.append((p - g) ** 2)
            logs.append(np.maximum(p / g, g / p))
        r, e, t = np.concatenate(ratios), np.concatenate(sq), np.concatenate(logs)
        assert agg["pixel_count"] == r.size
        assert agg["abs_rel"] == pytest.approx(r.mean(), abs=1e-9)
        assert agg["rms"] == pytest.approx(np.sqrt(e.mean()), abs=1e-9)
        assert agg["delta1"] == pytest.approx((t < 1.25).mean(), abs=1e-12)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 1 + 8
    assert (tmp_path / "preview" / "00000_gt.png").exists()
    assert (tmp_path / "preview" / "00000_uncertainty.png").exists()
    assert len(rep["retrieved_ids"]) == len(samples)


def test_all_protocol_is_unmasked(dataset, stores, tiny_net):
    m, rare = dataset
    cfg = BenchmarkConfig(M=2, rows=("no_retrieval",), protocols=("all",))
    rep = run_benchmark(m["test"], tiny_net, stores, cfg)
    samples = [m["test"].load(i) for i in range(len(m["test"]))]
    preds = predict(tiny_net, [s.image for s in samples])
    for i, s in enumerate(samples):
        ref = depth_metrics(preds[i], s.depth)
        got = next(r for r in rep.records if r["image"] == i)
        assert got["abs_rel"] == pytest.approx(ref.abs_rel, rel=1e-6)


def test_no_retrieval_row_is_m0(dataset, stores, tiny_net):
    m, rare = dataset
    a = run_benchmark(m["test"], tiny_net, stores, BenchmarkConfig(M=2, rows=("no_retrieval",), protocols=("all",)))
    b = run_benchmark(m["test"], tiny_net, None, BenchmarkConfig(M=0, rows=("rad",), protocols=("all",)))
    assert a.aggregate["no_retrieval", "all"].abs_rel == b.aggregate["rad", "all"].abs_rel


def test_deterministic(dataset, stores, tiny_net):
    m, rare = dataset
    cfg = BenchmarkConfig(M=2, rare_classes=tuple(rare), seed=3)
    a = run_benchmark(m["test"], tiny_net, stores, cfg)
    b = run_benchmark(m["test"], tiny_net, stores, cfg)
    assert a.aggregate == b.aggregate


def test_configuration_errors(dataset, stores, tiny_net, tmp_path):
    m, rare = dataset
    with pytest.raises(BenchmarkConfigError):
        BenchmarkConfig(rows=("rad", "oracle"))
    with pytest.raises(BenchmarkConfigError, match="rare class"):
        run_benchmark(m["test"], tiny_net, stores, BenchmarkConfig(M=2))
    with pytest.raises(BenchmarkConfigError):
        run_benchmark(m["test"], tiny_net, None, BenchmarkConfig(M=2, protocols=("all",)))
    bare = io.DatasetManifest("test", [io.ManifestEntry(e.image, e.depth, e.intrinsics, e.scene_id)
                                       for e in m["test"].entries], "pfm", root=m["test"].root)
    with pytest.raises(BenchmarkConfigError, match="class map"):
        run_benchmark(bare, tiny_net, stores, BenchmarkConfig(M=2, rare_classes=tuple(rare)))
    with pytest.raises(BenchmarkConfigError, match="empty"):
        run_benchmark(io.DatasetManifest("test", [], "pfm"), tiny_net, stores, BenchmarkConfig(M=2))


def test_pool_hygiene(dataset):
    m, _ = dataset
    check_pool_hygiene(m["test"], m["pool"])
    with pytest.raises(BenchmarkConfigError):
        check_pool_hygiene(m["pool"], None)
    with pytest.raises(BenchmarkConfigError):
        check_pool_hygiene(m["test"], m["test"])
    leaky = io.DatasetManifest("pool", m["pool"].entries + m["test"].entries[:1], "pfm", root=m["pool"].root)
    leaky.entries[-1] = io.ManifestEntry(str(m["test"].path(m["test"].entries[0].image)),
                                         str(m["test"].path(m["test"].entries[0].depth)),
                                         m["test"].entries[0].intrinsics, 99)
    with pytest.raises(BenchmarkConfigError, match="test images"):
        check_pool_hygiene(m["test"], leaky)
