"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    magic      8 bytes  b"NSSLCKPT"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (config text, step, RNG scheme)
    count      u32      number of tensor records
    record     name_len u32, name (UTF-8), rank u32, extents u64 * rank,
               payload float64 little-endian, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NSSLCKPT"
VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=_F64, order="C")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        end = pos + 8 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data[pos:end], dtype=_F64).reshape(shape).astype(np.float64)
        pos = end
    return meta, tensors


# -- trainer state ----------------------------------------------------------------
def state_tensors(trainer) -> dict[str, np.ndarray]:
    st = trainer.state
    out: dict[str, np.ndarray] = {}
    for name, p in st.online.named_parameters():
        out[f"online/{name}"] = p.data
    for name, arr in st.online.named_buffers():
        out[f"buffers/online/{name}"] = arr
    if st.target is not None:
        for name, p in st.target.named_parameters():
            out[f"target/{name}"] = p.data
        for name, arr in st.target.named_buffers():
            out[f"buffers/target/{name}"] = arr
    names = [n for n, _ in st.online.named_parameters()]
    for name, buf in zip(names, st.optimizer.buffers):
        if buf is not None:
            out[f"opt/{name}"] = buf
    if st.captured is not None:
        for site, s in st.captured.sites.items():
            out[f"stats/{site}/mean"] = s.mean
            out[f"stats/{site}/std"] = s.std
            out[f"stats/{site}/final"] = np.array([1.0 if s.final_in_block else 0.0])
    return out


def save_trainer(path: str | Path, trainer) -> None:
    st = trainer.state
    meta = {
        "config": trainer.cfg.dumps(),
        "config_hash": trainer.cfg.hash(),
        "step": st.step,
        "epoch": st.epoch,
        "rng": {"scheme": "per-epoch", "seed": st.seed, "next_epoch": st.epoch},
    }
    write_checkpoint(path, meta, state_tensors(trainer))


def _load_module(module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    for name, p in module.named_parameters():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks {key}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"{key}: shape {tensors[key].shape} != {p.shape}")
        p.data = tensors[key].copy()
    for mname, mod in module.modules():
        if hasattr(mod, "load_buffers") and mod.buffers():
            bufs = {k: tensors[f"buffers/{prefix}/{mname}.{k}"] for k in mod.buffers()}
            mod.load_buffers(bufs)


def load_trainer(path: str | Path, train=None, test=None):
    """Rebuild a Trainer from a checkpoint; training continues at the saved epoch."""
    from .config import parse_text
    from .init_protocol import CapturedStats, SiteStats, strip_bn
    from .training import Optimizer, Trainer

    meta, tensors = read_checkpoint(path)
    cfg = parse_text(meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise CheckpointError("config hash mismatch: checkpoint config was altered")
    trainer = Trainer(cfg, train, test, skip_init=True)
    st = trainer.state
    if cfg.init == "bn-capture-reinit":
        strip_bn(st.online)
        if st.target is not None:
            strip_bn(st.target)
        sites: dict[str, SiteStats] = {}
        for key in tensors:
            if key.startswith("stats/") and key.endswith("/mean"):
                site = key[len("stats/") : -len("/mean")]
                sites[site] = SiteStats(
                    tensors[key].copy(), tensors[f"stats/{site}/std"].copy(), bool(tensors[f"stats/{site}/final"][0])
                )
        st.captured = CapturedStats(sites, cfg.stat_floor)
    _load_module(st.online, "online", tensors)
    if st.target is not None:
        _load_module(st.target, "target", tensors)
    st.optimizer = Optimizer(st.online.parameters(), cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.trust_coeff)
    names = [n for n, _ in st.online.named_parameters()]
    st.optimizer.buffers = [tensors[f"opt/{n}"].copy() if f"opt/{n}" in tensors else None for n in names]
    st.step = int(meta["step"])
    st.epoch = int(meta["epoch"])
    return trainer
