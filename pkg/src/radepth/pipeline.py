"""Context assembly and end-to-end retrieval-augmented inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from .correspondence import (
    CorrespondenceSet,
    MatchConfig,
    TokenMatchMap,
    expand_matching_tokens,
    match_desk,
    pixels_to_tokens,
)
from .geometry import CameraIntrinsics, PoseBounds, make_context_3d, sample_pose
from .network import DualStreamNet, NetConfig, context_tensor, image_tensor, match_tensors
from .retrieval import DescriptorIndex, RetrievalConfig, retrieve_context
from .structures import ContextSample, DepthMap, InputError
from .uncertainty import SegmentMap, segment_desk


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass
class ContextBundle:
    samples: list[ContextSample]
    token_map: TokenMatchMap
    matches: list[CorrespondenceSet] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def token_map_from_matches(matches: list[CorrespondenceSet], cfg: NetConfig, radius: int) -> TokenMatchMap:
    """Quantize each context's matches to the network grid and expand them."""
    raw = []
    for mset in matches:
        sa = cfg.image_size[0] / mset.image_a_size[0]
        sb = cfg.image_size[0] / mset.image_b_size[0]
        raw.append(pixels_to_tokens(mset, cfg.patch, sa, sb))
    return expand_matching_tokens(raw, radius, cfg.grid, cfg.grid, len(matches))


def augmented_context(image, depth: DepthMap, K: CameraIntrinsics, M: int, rng: np.random.Generator,
                      cfg: NetConfig, radius: int = 1, max_angle_deg: float = 10.0,
                      translation_fraction: float = 0.05, splat_radius: int = 1) -> ContextBundle:
    bounds = PoseBounds.for_depth(depth, max_angle_deg, translation_fraction)
    samples, matches = [], []
    for _ in range(M):
        sample, corr = make_context_3d(image, depth, K, sample_pose(rng, bounds), splat_radius)
        samples.append(sample)
        matches.append(corr)
    return ContextBundle(samples, token_map_from_matches(matches, cfg, radius), matches,
                         {"source": "augmented", "match_counts": [len(m) for m in matches]})


def matched_context(image, samples: list[ContextSample], cfg: NetConfig, radius: int = 1,
                    match_cfg: MatchConfig | None = None, matcher: Callable | None = None) -> ContextBundle:
    """Match the input against each context image and build the token map."""
    matcher = matcher or (lambda a, b: match_desk(a, b, match_cfg))
    matches = [matcher(image, s.image) for s in samples]
    return ContextBundle(list(samples), token_map_from_matches(matches, cfg, radius), matches,
                         {"match_counts": [len(m) for m in matches]})


@dataclass
class InferenceStores:
    """Everything retrieval needs: the frozen uncertainty model, the pool
    index and the pool samples."""

    frozen_model: Callable
    index: DescriptorIndex
    pool: Mapping[int, ContextSample]
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    radius: int = 1
    segmenter: Callable[[np.ndarray], SegmentMap] = segment_desk


def retrieved_context(image, stores: InferenceStores, cfg: NetConfig, M: int, rng: np.random.Generator,
                      scene_id=None, segments: SegmentMap | None = None, matcher: Callable | None = None,
                      use_uncertainty: bool | None = None) -> ContextBundle:
    rcfg = stores.retrieval
    rcfg = RetrievalConfig(M, rcfg.noise, rcfg.h, rcfg.q,
                           rcfg.use_uncertainty if use_uncertainty is None else use_uncertainty)
    try:
        seg = segments if segments is not None else stores.segmenter(image)
    except Exception as exc:
        raise StageError("segmentation", exc) from exc
    try:
        res = retrieve_context(image, stores.frozen_model, seg, stores.index, stores.pool, rcfg, rng, scene_id)
    except Exception as exc:
        raise StageError("retrieval", exc) from exc
    try:
        bundle = matched_context(image, res.samples, cfg, stores.radius, stores.match, matcher)
    except Exception as exc:
        raise StageError("matching", exc) from exc
    u = res.uncertainty
    bundle.diagnostics.update({
        "source": "retrieved",
        "status": res.status,
        "retrieved_ids": res.ids,
        "similarities": res.similarities,
        "kept_segments": sorted(res.kept),
        "num_segments": seg.num_segments,
        "fallback_unmasked": res.fallback_unmasked,
        "uncertainty_mean": float(u.values[u.valid].mean()) if u is not None and u.valid.any() else None,
        "uncertainty_max": float(u.values[u.valid].max()) if u is not None and u.valid.any() else None,
    })
    bundle.diagnostics["uncertainty_map"] = u
    return bundle


def predict(net: DualStreamNet, images: list[np.ndarray], bundles: list[ContextBundle] | None = None,
            full_context: bool = False) -> list[DepthMap]:
    """Batched forward pass. Samples with fewer contexts are padded with blank,
    unmatched context slots, which cannot affect the output."""
    cfg = net.cfg
    dtype = next(net.parameters()).dtype
    x = image_tensor(list(images), dtype)
    m = max((len(b.samples) for b in bundles), default=0) if bundles else 0
    with torch.no_grad():
        if m == 0:
            out = net(x)
        else:
            ctx = torch.zeros(len(images), m, 4, *cfg.image_size, dtype=dtype)
            maps = []
            for i, b in enumerate(bundles):
                if b.samples:
                    ctx[i, : len(b.samples)] = context_tensor(b.samples, cfg, dtype)
                if full_context:
                    maps.append(TokenMatchMap.full(cfg.num_tokens, cfg.grid, len(b.samples)))
                else:
                    maps.append(b.token_map)
            for tm in maps:
                tm.validate(m)
            index, valid = match_tensors(maps, cfg.num_tokens)
            out = net(x, ctx, index, valid)
    return [DepthMap(p, np.ones_like(p, bool)) for p in out.double().numpy()]


def run_inference(image, stores: InferenceStores | None, net: DualStreamNet, M: int,
                  rng: np.random.Generator, scene_id=None, segments=None, matcher=None,
                  full_context: bool = False, use_uncertainty: bool | None = None):
    """Retrieve, match and predict. ``M = 0`` runs the single-stream model.

    Returns ``(depth, diagnostics)``.
    """
    if image.shape[:2] != net.cfg.image_size:
        raise InputError(f"image {image.shape[:2]} must match the network resolution {net.cfg.image_size}")
    if M == 0:
        return predict(net, [image])[0], {"source": "none", "retrieved_ids": [], "match_counts": []}
    bundle = retrieved_context(image, stores, net.cfg, M, rng, scene_id, segments, matcher, use_uncertainty)
    try:
        depth = predict(net, [image], [bundle], full_context)[0]
    except Exception as exc:
        raise StageError("network", exc) from exc
    diag = {k: v for k, v in bundle.diagnostics.items() if k != "uncertainty_map"}
    diag["matched_tokens"] = bundle.token_map.total()
    return depth, diag
