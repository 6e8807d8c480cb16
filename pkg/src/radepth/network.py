"""Dual-stream ViT encoder with matched cross-attention and a small depth head.

The input stream sees RGB patches; the context stream sees RGB-D patches of up
to ``max_contexts`` context images, each with its own positional encoding.
Context images attend only to themselves. In every block, each input token
attends to all input tokens plus the context tokens listed in its match set,
using the keys and values that the context stream's block of the same depth
produced.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .correspondence import TokenMatchMap
from .structures import ContextSample, DepthMap, InputError, check_image

GROUPS = ("input_embed", "context_embed", "input_pos", "context_pos", "input_blocks", "context_blocks", "decoder")


@dataclass
class NetConfig:
    image_size: tuple[int, int] = (64, 64)
    patch: int = 8
    d_model: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 2
    max_contexts: int = 4
    taps: tuple[int, ...] = (1, 3)
    decoder_channels: int = 32
    refine_channels: int = 8
    min_depth: float = 0.5
    max_depth: float = 10.0
    init_depth: float = 3.0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.taps = tuple(int(t) for t in self.taps)
        if self.d_model % self.num_heads:
            raise InputError("d_model must be divisible by num_heads")
        if any(s % self.patch for s in self.image_size):
            raise InputError(f"image size {self.image_size} is not divisible by patch {self.patch}")
        if any(not 0 <= t < self.num_blocks for t in self.taps):
            raise InputError("decoder taps must index existing blocks")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def num_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1]

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["taps"] = list(self.taps)
        return d


# ---------------------------------------------------------------------------
# attention kernels
# ---------------------------------------------------------------------------


def _heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.view(b, n, h, d // h).transpose(1, 2)


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def self_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    qh, kh, vh = _heads(q, num_heads), _heads(k, num_heads), _heads(v, num_heads)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    return _merge(torch.softmax(logits, dim=-1) @ vh)


def matched_cross_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    k_ctx: Tensor,
    v_ctx: Tensor,
    index: Tensor,
    valid: Tensor,
    num_heads: int,
    return_weights: bool = False,
):
    """Attention where token j's key/value set is its own stream plus the
    context rows ``index[:, j, valid[:, j]]``.

    Shapes: ``q, k, v`` are ``(B, N, d)``; ``k_ctx, v_ctx`` are ``(B, T, d)``
    with all context tokens flattened; ``index``/``valid`` are ``(B, N, L)``.
    Returned weights are ``(B, h, N, N + L)`` with padded slots at zero.
    """
    B, N, d = q.shape
    qh, kh, vh = _heads(q, num_heads), _heads(k, num_heads), _heads(v, num_heads)
    dh = qh.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    self_logits = qh @ kh.transpose(-1, -2) * scale
    L = index.shape[-1]
    if L == 0:
        w = torch.softmax(self_logits, dim=-1)
        out = _merge(w @ vh)
        return (out, w) if return_weights else out
    if index.min() < 0 or index.max() >= k_ctx.shape[1]:
        raise InputError("match index outside the context token range")
    kc, vc = _heads(k_ctx, num_heads), _heads(v_ctx, num_heads)
    # Score every context key once, then pick out each token's matched logits;
    # cheaper than materializing per-token key sets.
    gidx = index[:, None].expand(B, num_heads, N, L)
    ctx_logits = torch.gather(qh @ kc.transpose(-1, -2) * scale, -1, gidx)
    ctx_logits = ctx_logits.masked_fill(~valid[:, None], float("-inf"))
    w = torch.softmax(torch.cat([self_logits, ctx_logits], dim=-1), dim=-1)
    w_ctx = torch.zeros(B, num_heads, N, kc.shape[2], dtype=w.dtype, device=w.device)
    w_ctx = w_ctx.scatter_add(-1, gidx, w[..., N:])
    out = _merge(w[..., :N] @ vh + w_ctx @ vc)
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def qkv_of(self, x: Tensor):
        return self.qkv(self.norm1(x)).chunk(3, dim=-1)

    def finish(self, x: Tensor, attn: Tensor) -> Tensor:
        x = x + self.proj(attn)
        return x + self.mlp(self.norm2(x))

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.qkv_of(x)
        return self.finish(x, self_attention(q, k, v, self.heads))


class DepthHead(nn.Module):
    """Fuses tapped token maps, upsamples them and refines the result with the
    full-resolution input image so depth edges can fall inside a patch."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.decoder_channels
        p = cfg.patch
        self.cfg = cfg
        self.fuse = nn.Conv2d(cfg.d_model * len(cfg.taps), c, 1)
        self.mix = nn.Conv2d(c, c, 3, padding=1)
        self.up = nn.Conv2d(c, 8 * p * p, 1)
        r = cfg.refine_channels
        self.refine = nn.Conv2d(8 + 3, r, 3, padding=1)
        self.refine2 = nn.Conv2d(r, r, 3, padding=1)
        self.out = nn.Conv2d(r, 1, 3, padding=1)
        with torch.no_grad():
            self.out.bias.fill_(math.log(math.expm1(cfg.init_depth)))

    def forward(self, taps: list[Tensor], images: Tensor) -> Tensor:
        gh, gw = self.cfg.grid
        x = torch.cat(taps, dim=-1)
        b = x.shape[0]
        x = x.transpose(1, 2).reshape(b, -1, gh, gw)
        x = F.gelu(self.fuse(x))
        x = F.gelu(self.mix(x)) + x
        x = F.gelu(F.pixel_shuffle(self.up(x), self.cfg.patch))
        x = F.gelu(self.refine(torch.cat([x, images], dim=1)))
        x = F.gelu(self.refine2(x)) + x
        return F.softplus(self.out(x))[:, 0] + 1e-3


def patchify(images: Tensor, p: int) -> Tensor:
    """``(B, C, H, W)`` -> ``(B, N, C*p*p)`` with row-major patches and
    ``(channel, row, col)`` ordering inside each patch."""
    b, c, h, w = images.shape
    if h % p or w % p:
        raise InputError(f"image size {(h, w)} is not divisible by patch {p}")
    x = images.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class DualStreamNet(nn.Module):
    def __init__(self, cfg: NetConfig, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        d, p, n = cfg.d_model, cfg.patch, cfg.num_tokens
        self.input_embed = nn.Linear(3 * p * p, d)
        self.context_embed = nn.Linear(4 * p * p, d)
        self.input_pos = nn.Parameter(0.02 * torch.randn(n, d))
        self.context_pos = nn.Parameter(0.02 * torch.randn(cfg.max_contexts, n, d))
        self.input_blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.context_blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.decoder = DepthHead(cfg)
        self.frozen: set[str] = set()

    # -- parameter groups ---------------------------------------------------

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".")[0]

    def group_parameters(self, group: str):
        return [p for name, p in self.named_parameters() if self.group_of(name) == group]

    def freeze(self, *groups: str) -> None:
        for g in groups:
            if g not in GROUPS:
                raise InputError(f"unknown parameter group {g}")
            self.frozen.add(g)
            for p in self.group_parameters(g):
                p.requires_grad_(False)

    def unfreeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen.discard(g)
            for p in self.group_parameters(g):
                p.requires_grad_(True)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def init_context_stream(self, pos_jitter: float = 0.02, seed: int = 0) -> None:
        """Copy the input stream into the context stream. The depth channel of
        the patch projection starts at zero and every context slot gets the
        input positional encoding plus a small distinct perturbation."""
        p2 = self.cfg.patch**2
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.context_blocks.load_state_dict(self.input_blocks.state_dict())
            self.context_embed.weight.zero_()
            self.context_embed.weight[:, : 3 * p2] = self.input_embed.weight
            self.context_embed.bias.copy_(self.input_embed.bias)
            noise = pos_jitter * torch.randn(self.context_pos.shape, generator=gen, dtype=self.context_pos.dtype)
            self.context_pos.copy_(self.input_pos[None] + noise)

    # -- forward pieces -----------------------------------------------------

    def embed_input(self, images: Tensor) -> Tensor:
        return self.input_embed(patchify(images, self.cfg.patch)) + self.input_pos

    def embed_context(self, rgbd: Tensor, slot: int) -> Tensor:
        if not 0 <= slot < self.cfg.max_contexts:
            raise InputError(f"context slot {slot} outside [0, {self.cfg.max_contexts})")
        if rgbd.shape[1] != 4:
            raise InputError("context patches need 4 channels (RGB + normalized depth)")
        return self.context_embed(patchify(rgbd, self.cfg.patch)) + self.context_pos[slot]

    def encode(self, images: Tensor, contexts: Tensor | None = None, index: Tensor | None = None,
               valid: Tensor | None = None) -> list[Tensor]:
        """Run both streams; returns the input-stream features at the taps.

        ``contexts`` is ``(B, m, 4, H, W)`` with ``m <= max_contexts``.
        """
        x = self.embed_input(images)
        B, N, d = x.shape
        use_ctx = contexts is not None and contexts.shape[1] > 0
        if use_ctx:
            m = contexts.shape[1]
            if m > self.cfg.max_contexts:
                raise InputError(f"{m} contexts exceed the configured maximum {self.cfg.max_contexts}")
            c = torch.stack([self.embed_context(contexts[:, s], s) for s in range(m)], dim=1)
            nc = c.shape[2]
            c = c.reshape(B * m, nc, d)
            if index is None:
                index = torch.zeros(B, N, 0, dtype=torch.long)
                valid = torch.zeros(B, N, 0, dtype=torch.bool)
            if index.numel() and index.max() >= m * nc:
                raise InputError("match map references a missing context image")
        taps = []
        heads = self.cfg.num_heads
        for b, blk in enumerate(self.input_blocks):
            q, k, v = blk.qkv_of(x)
            if use_ctx:
                cblk = self.context_blocks[b]
                qc, kc, vc = cblk.qkv_of(c)
                attn = matched_cross_attention(q, k, v, kc.reshape(B, m * nc, d), vc.reshape(B, m * nc, d),
                                               index, valid, heads)
                c = cblk.finish(c, self_attention(qc, kc, vc, heads))
            else:
                attn = self_attention(q, k, v, heads)
            x = blk.finish(x, attn)
            if b in self.cfg.taps:
                taps.append(x)
        return taps

    def forward(self, images, contexts=None, index=None, valid=None) -> Tensor:
        return self.decoder(self.encode(images, contexts, index, valid), images)


# ---------------------------------------------------------------------------
# numpy-facing helpers
# ---------------------------------------------------------------------------


def normalize_context_depth(depth: DepthMap, min_depth: float, max_depth: float) -> np.ndarray:
    """Inverse depth mapped affinely so ``min_depth -> 1`` and ``max_depth -> 0``;
    invalid pixels are 0."""
    inv = np.divide(1.0, depth.values, out=np.zeros_like(depth.values), where=depth.valid)
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    out = np.clip((inv - lo) / (hi - lo), 0.0, 1.0)
    return np.where(depth.valid, out, 0.0)


def image_tensor(images, dtype=torch.float32) -> Tensor:
    arr = np.stack([check_image(im) for im in images]) if isinstance(images, (list, tuple)) else check_image(images)[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def context_tensor(samples: list[ContextSample], cfg: NetConfig, dtype=torch.float32) -> Tensor:
    """``(m, 4, H, W)`` stack of RGB plus normalized inverse depth."""
    if not samples:
        return torch.zeros(0, 4, *cfg.image_size, dtype=dtype)
    arrs = []
    for s in samples:
        dn = normalize_context_depth(s.depth, cfg.min_depth, cfg.max_depth)
        arrs.append(np.concatenate([s.image.transpose(2, 0, 1), dn[None]], axis=0))
    return torch.from_numpy(np.stack(arrs)).to(dtype)


def project_input_patches(image, net: DualStreamNet) -> Tensor:
    return net.embed_input(image_tensor(image, next(net.parameters()).dtype))[0]


def project_context_patches(sample: ContextSample, net: DualStreamNet, slot: int) -> Tensor:
    t = context_tensor([sample], net.cfg, next(net.parameters()).dtype)
    return net.embed_context(t, slot)[0]


def match_tensors(maps: list[TokenMatchMap], num_tokens: int) -> tuple[Tensor, Tensor]:
    """Stack per-sample match maps into padded ``(B, N, L)`` index/valid tensors."""
    padded = [m.to_padded() for m in maps]
    L = max([p[0].shape[1] for p in padded] + [0])
    index = np.zeros((len(maps), num_tokens, L), dtype=np.int64)
    valid = np.zeros((len(maps), num_tokens, L), dtype=bool)
    for i, (ix, ok) in enumerate(padded):
        index[i, :, : ix.shape[1]] = ix
        valid[i, :, : ix.shape[1]] = ok
    return torch.from_numpy(index), torch.from_numpy(valid)


def silog_loss_torch(pred: Tensor, gt: Tensor, valid: Tensor, lam: float = 0.5) -> Tensor:
    """Scale-invariant log loss averaged over the images of a batch."""
    d = torch.where(valid, torch.log(pred.clamp_min(1e-12)) - torch.log(gt.clamp_min(1e-12)), torch.zeros_like(pred))
    n = valid.flatten(1).sum(dim=1)
    if (n == 0).any():
        raise InputError("silog loss is undefined for an image with no valid pixels")
    mean_sq = (d**2).flatten(1).sum(dim=1) / n
    mean = d.flatten(1).sum(dim=1) / n
    return (mean_sq - lam * mean**2).mean()


class UndefinedLossError(ValueError):
    pass


def silog_loss(pred: DepthMap, gt: DepthMap, lam: float = 0.5) -> float:
    sel = pred.valid & gt.valid
    if not sel.any():
        raise UndefinedLossError("no jointly valid pixels")
    d = np.log(pred.values[sel]) - np.log(gt.values[sel])
    return float(np.mean(d**2) - lam * np.mean(d) ** 2)


@dataclass
class NetworkDepthModel:
    """Frozen single-stream evaluation of a network as a depth model handle."""

    net: DualStreamNet
    batch_size: int = 32
    stats: dict = field(default_factory=lambda: {"calls": 0})

    def _prep(self, image):
        image = check_image(image)
        if image.shape[:2] != self.net.cfg.image_size:
            from skimage.transform import resize

            image = resize(image, self.net.cfg.image_size, order=1, anti_aliasing=False)
        return image

    def predict_batch(self, images) -> list[DepthMap]:
        out = []
        self.stats["calls"] += len(images)
        with torch.no_grad():
            for i in range(0, len(images), self.batch_size):
                chunk = [self._prep(im) for im in images[i: i + self.batch_size]]
                t = image_tensor(chunk, next(self.net.parameters()).dtype)
                pred = self.net(t).double().numpy()
                out.extend(DepthMap(p, np.ones_like(p, bool)) for p in pred)
        return out

    def __call__(self, image) -> DepthMap:
        return self.predict_batch([image])[0]
