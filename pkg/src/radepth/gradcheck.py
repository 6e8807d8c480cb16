"""Finite-difference verification of the network's analytic gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import GROUPS, DualStreamNet, silog_loss_torch

REL_FLOOR = 1e-7


@dataclass
class GradCheckBatch:
    images: torch.Tensor
    gt: torch.Tensor
    valid: torch.Tensor
    contexts: torch.Tensor | None = None
    index: torch.Tensor | None = None
    match_valid: torch.Tensor | None = None


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    frozen_max_abs_grad: dict[str, float] = field(default_factory=dict)
    coordinates: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def loss_of(net: DualStreamNet, batch: GradCheckBatch, lam: float) -> torch.Tensor:
    pred = net(batch.images, batch.contexts, batch.index, batch.match_valid)
    return silog_loss_torch(pred, batch.gt, batch.valid, lam)


def grad_check(net: DualStreamNet, batch: GradCheckBatch, groups=GROUPS, eps: float = 1e-4,
               coords_per_group: int = 32, lam: float = 0.5, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of the full loss with central differences.

    Runs on a float64 copy of ``net``. Frozen groups are not differentiated;
    their reported analytic gradient is what an optimizer step would see.
    """
    net = copy.deepcopy(net).double()
    batch = GradCheckBatch(*(t.double() if t is not None and t.is_floating_point() else t
                             for t in (batch.images, batch.gt, batch.valid, batch.contexts,
                                       batch.index, batch.match_valid)))
    net.zero_grad(set_to_none=True)
    loss_of(net, batch, lam).backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for g in groups:
        params = [p for n, p in net.named_parameters() if net.group_of(n) == g]
        sizes = np.array([p.numel() for p in params])
        if g in net.frozen:
            grads = [p.grad for p in params if p.grad is not None]
            report.frozen_max_abs_grad[g] = max((float(x.abs().max()) for x in grads), default=0.0)
            continue
        total = int(sizes.sum())
        flat_ids = rng.choice(total, size=min(coords_per_group, total), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        for fid in flat_ids:
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            p = params[pi]
            local = int(fid - offsets[pi])
            analytic = float(p.grad.view(-1)[local]) if p.grad is not None else 0.0
            with torch.no_grad():
                flat = p.data.view(-1)
                orig = float(flat[local])
                flat[local] = orig + eps
                lp = float(loss_of(net, batch, lam))
                flat[local] = orig - eps
                lm = float(loss_of(net, batch, lam))
                flat[local] = orig
            numeric = (lp - lm) / (2 * eps)
            worst = max(worst, relative_error(analytic, numeric))
        report.max_rel_error[g] = worst
        report.coordinates[g] = len(flat_ids)
    return report
