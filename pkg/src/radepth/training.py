"""Staged training of the single-stream baseline and the dual-stream model.

Stage 1 is a fresh initialization (no pretrained backbone exists at desk
scale). Stage 2 trains the single-stream model end to end. Stage 3 copies the
input stream into the context stream. Stage 4 freezes the decoder and trains
both streams on retrieved or 3D-augmented context.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .geometry import CameraIntrinsics
from .network import DualStreamNet, context_tensor, image_tensor, match_tensors, silog_loss_torch
from .pipeline import ContextBundle, augmented_context
from .structures import DepthMap, InputError

log = logging.getLogger(__name__)


class FrozenDriftError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    stage: int = 2
    epochs: int = 20
    batch_size: int = 16
    lr: dict = field(default_factory=lambda: {2: 5e-5, 4: 5e-5})
    input_lr_scale: float = 1.0
    context_lr_scale: float = 1.0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    decay_factor: float = 0.1
    stagnation_epochs: int = 5
    stagnation_tol: float = 1e-4
    silog_lambda: float = 0.5
    p_retrieval: float = 0.5
    M: int = 4
    radius: int = 1
    noise_augment: float = 0.0
    max_angle_deg: float = 10.0
    translation_fraction: float = 0.05
    aug_variants: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3, 4):
            raise InputError("stage must be 1, 2, 3 or 4")
        if not 0 <= self.p_retrieval <= 1:
            raise InputError("context source probabilities must lie in [0, 1]")

    @property
    def p_augmentation(self) -> float:
        return 1.0 - self.p_retrieval


@dataclass
class TrainSample:
    image: np.ndarray
    depth: DepthMap
    K: CameraIntrinsics
    scene_id: int
    sample_id: int


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    source_counts: dict = field(default_factory=lambda: {"retrieved": 0, "augmented": 0})
    checkpoints: list[str] = field(default_factory=list)


def _optimizer(net: DualStreamNet, plan: TrainPlan, stage: int):
    lr = plan.lr[stage]
    scale = {"input": plan.input_lr_scale, "context": plan.context_lr_scale, "decoder": 1.0}
    buckets = {k: [] for k in scale}
    for name, p in net.named_parameters():
        if p.requires_grad:
            buckets[net.group_of(name).split("_")[0]].append(p)
    groups = [{"params": ps, "lr": lr * scale[k]} for k, ps in buckets.items() if ps]
    opt = torch.optim.AdamW(groups, lr=lr, betas=plan.betas, weight_decay=plan.weight_decay)
    # torch decays once more than `patience` epochs have not improved.
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=plan.decay_factor, patience=plan.stagnation_epochs - 1,
        threshold=plan.stagnation_tol, threshold_mode="abs")
    return opt, sched


def _frozen_snapshot(net: DualStreamNet) -> dict:
    return {n: p.detach().clone() for n, p in net.named_parameters() if net.group_of(n) in net.frozen}


def _check_frozen(net: DualStreamNet, snap: dict) -> None:
    params = dict(net.named_parameters())
    for n, before in snap.items():
        if not torch.equal(params[n].detach(), before):
            raise FrozenDriftError(f"frozen parameter {n} changed during training")


def _targets(samples: list[TrainSample], dtype):
    gt = torch.from_numpy(np.stack([s.depth.values for s in samples])).to(dtype)
    valid = torch.from_numpy(np.stack([s.depth.valid for s in samples]))
    return gt, valid


def _noisy(images, max_sigma: float, rng: np.random.Generator):
    """Gaussian pixel noise with a per-image std drawn from [0, max_sigma]."""
    if max_sigma <= 0:
        return images
    return [np.clip(im + rng.normal(0, rng.uniform(0, max_sigma), im.shape), 0, 1) for im in images]


def _epoch_end(net, plan, sched, opt, loss_sum, count, tlog, snap, out_dir, stage, epoch):
    mean = loss_sum / max(count, 1)
    _check_frozen(net, snap)
    sched.step(mean)
    tlog.epoch_losses.append(mean)
    tlog.learning_rates.append(opt.param_groups[0]["lr"])
    log.info("stage %d epoch %d loss %.5f", stage, epoch, mean)
    if out_dir is not None:
        path = Path(out_dir) / f"stage{stage}_epoch{epoch:03d}.radw"
        save_checkpoint(net, path)
        tlog.checkpoints.append(str(path))


def train_single_stream(net: DualStreamNet, samples: list[TrainSample], plan: TrainPlan,
                        out_dir=None) -> TrainLog:
    """Stage 2: all single-stream weights train on the silog loss."""
    rng = np.random.default_rng(plan.seed)
    torch.manual_seed(plan.seed)
    opt, sched = _optimizer(net, plan, 2)
    snap = _frozen_snapshot(net)
    tlog = TrainLog()
    dtype = next(net.parameters()).dtype
    net.train()
    for epoch in range(plan.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for i in range(0, len(order), plan.batch_size):
            batch = [samples[k] for k in order[i: i + plan.batch_size]]
            imgs = _noisy([s.image for s in batch], plan.noise_augment, rng)
            gt, valid = _targets(batch, dtype)
            loss = silog_loss_torch(net(image_tensor(imgs, dtype)), gt, valid, plan.silog_lambda)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        _epoch_end(net, plan, sched, opt, total, count, tlog, snap, out_dir, 2, epoch)
    net.eval()
    return tlog


def build_context_stream(net: DualStreamNet, seed: int = 0) -> DualStreamNet:
    """Stage 3: the dual-stream model starts from a copy of the stage-2 one."""
    net = copy.deepcopy(net)
    net.init_context_stream(seed=seed)
    return net


def train_dual_stream(net: DualStreamNet, samples: list[TrainSample], plan: TrainPlan,
                      retrieval_context: Callable[[TrainSample], ContextBundle], out_dir=None) -> TrainLog:
    """Stage 4: decoder frozen; each sample draws retrieved context with
    probability ``p_retrieval`` and 3D-augmented context otherwise."""
    rng = np.random.default_rng(plan.seed + 4)
    torch.manual_seed(plan.seed + 4)
    net.freeze("decoder")
    opt, sched = _optimizer(net, plan, 4)
    snap = _frozen_snapshot(net)
    tlog = TrainLog()
    cfg = net.cfg
    dtype = next(net.parameters()).dtype
    aug_cache: dict[int, list[ContextBundle]] = {}

    def augmented(s):
        # aug_variants > 0 keeps that many rendered poses per sample and reuses them
        pool = aug_cache.setdefault(s.sample_id, [])
        if plan.aug_variants and len(pool) >= plan.aug_variants:
            return pool[rng.integers(len(pool))]
        b = augmented_context(s.image, s.depth, s.K, plan.M, rng, cfg, plan.radius,
                              plan.max_angle_deg, plan.translation_fraction)
        if plan.aug_variants:
            pool.append(b)
        return b

    net.train()
    for epoch in range(plan.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for i in range(0, len(order), plan.batch_size):
            batch = [samples[k] for k in order[i: i + plan.batch_size]]
            bundles = []
            for s in batch:
                if rng.random() < plan.p_retrieval:
                    bundles.append(retrieval_context(s))
                    tlog.source_counts["retrieved"] += 1
                else:
                    bundles.append(augmented(s))
                    tlog.source_counts["augmented"] += 1
            m = max(len(b.samples) for b in bundles)
            ctx = torch.zeros(len(batch), m, 4, *cfg.image_size, dtype=dtype)
            for j, b in enumerate(bundles):
                if b.samples:
                    ctx[j, : len(b.samples)] = context_tensor(b.samples, cfg, dtype)
            index, valid = match_tensors([b.token_map for b in bundles], cfg.num_tokens)
            gt, gvalid = _targets(batch, dtype)
            x = image_tensor(_noisy([s.image for s in batch], plan.noise_augment, rng), dtype)
            loss = silog_loss_torch(net(x, ctx if m else None, index, valid), gt, gvalid, plan.silog_lambda)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        _epoch_end(net, plan, sched, opt, total, count, tlog, snap, out_dir, 4, epoch)
    net.eval()
    return tlog


def train_staged(plan: TrainPlan, samples: list[TrainSample], net: DualStreamNet | None = None,
                 retrieval_context: Callable | None = None, out_dir=None):
    """Run one stage; stages above 1 require the previous stage's network."""
    if plan.stage == 1:
        raise InputError("stage 1 is the initialization; construct a DualStreamNet instead")
    if net is None:
        raise InputError(f"stage {plan.stage} needs the checkpoint of stage {plan.stage - 1}")
    if plan.stage == 2:
        return net, train_single_stream(net, samples, plan, out_dir)
    if plan.stage == 3:
        out = build_context_stream(net, plan.seed)
        if out_dir is not None:
            save_checkpoint(out, Path(out_dir) / "stage3.radw")
        return out, TrainLog()
    if retrieval_context is None:
        raise InputError("stage 4 needs a retrieval context source")
    return net, train_dual_stream(net, samples, plan, retrieval_context, out_dir)
