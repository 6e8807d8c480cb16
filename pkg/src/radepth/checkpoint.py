"""Binary checkpoints and TOML configuration files.

Checkpoint layout (little-endian): magic ``RADW``, u32 version, u32 tensor
count, then per tensor u32 name length, UTF-8 name, u32 rank, rank x u32 dims
and float32 data; finally a frozen-flag bitmap with one bit per tensor
(bit i of byte i // 8, least significant first). The network configuration is
written next to the checkpoint as ``<stem>.toml``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import tomli
import tomli_w
import torch

from .network import DualStreamNet, NetConfig
from .structures import InputError

MAGIC = b"RADW"
VERSION = 1


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(tomli_w.dumps(_plain(cfg)))


def load_config(path) -> dict:
    return tomli.loads(Path(path).read_text())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_path_for(path) -> Path:
    return Path(path).with_suffix(".toml")


def write_tensors(path, tensors: dict[str, np.ndarray], frozen: dict[str, bool]) -> None:
    names = list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        bits = np.array([frozen.get(n, False) for n in names], dtype=bool)
        fh.write(np.packbits(bits, bitorder="little").tobytes())


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off: off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, "<f4", n, off).reshape(dims).copy()
        off += 4 * n
    nbytes = (count + 7) // 8
    if len(data) != off + nbytes:
        raise InputError(f"{path}: trailing or missing bytes")
    bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), bitorder="little")[:count]
    return tensors, {name: bool(b) for name, b in zip(tensors, bits)}


def save_checkpoint(net: DualStreamNet, path, extra_config: dict | None = None) -> None:
    state = {k: v.detach().cpu().float().numpy() for k, v in net.state_dict().items()}
    frozen = {k: net.group_of(k) in net.frozen for k in state}
    write_tensors(path, state, frozen)
    cfg = {"net": net.cfg.to_dict()}
    if extra_config:
        cfg.update(extra_config)
    save_config(cfg, config_path_for(path))


def load_checkpoint(path, cfg: NetConfig | None = None) -> DualStreamNet:
    if cfg is None:
        cfg = NetConfig(**load_config(config_path_for(path))["net"])
    tensors, frozen = read_tensors(path)
    net = DualStreamNet(cfg)
    missing = set(net.state_dict()) - set(tensors)
    if missing:
        raise InputError(f"{path}: checkpoint lacks tensors {sorted(missing)[:5]}")
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    groups = {net.group_of(k) for k, f in frozen.items() if f}
    net.freeze(*groups)
    return net
