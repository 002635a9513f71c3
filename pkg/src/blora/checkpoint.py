"""Binary checkpoints: named f32 tensors followed by a JSON metadata block.

Layout (all integers little-endian)::

    b"BLRA"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 payload (row-major)
    u32 meta_len, meta (utf-8 JSON)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapter import GaussianMatrix, LowRankAdapter
from .model import FrozenModel, ModelConfig
from .tensor import Tensor

MAGIC = b"BLRA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        # ascontiguousarray would promote 0-d tensors to shape (1,)
        arr = np.asarray(tensors[name]).astype("<f4", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    meta = json.dumps(metadata, sort_keys=True, allow_nan=False).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a BLRA checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    (m,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(m).decode("utf-8"))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, metadata


# model / adapter conversion


def save_model(path, model: FrozenModel, metadata: dict) -> None:
    meta = dict(metadata, kind="base", model=_model_dict(model.cfg))
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[FrozenModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "base":
        raise CheckpointError(f"{path}: expected a base-model checkpoint, found {meta.get('kind')!r}")
    cfg = ModelConfig(**meta["model"])
    return FrozenModel(cfg, {k: v.astype(np.float64) for k, v in tensors.items()}), meta


def adapter_tensors(adapters) -> dict[str, np.ndarray]:
    out = {}
    for pid, ad in adapters.items():
        for key, t in ad.named_parameters().items():
            out[f"{pid}/{key}"] = t.data
    return out


def save_adapters(path, adapters, metadata: dict) -> None:
    any_ad = next(iter(adapters.values()))
    meta = dict(metadata, kind="adapters", rank=any_ad.rank, alpha=any_ad.alpha)
    save_checkpoint(path, adapter_tensors(adapters), meta)


def load_adapters(path) -> tuple[dict, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "adapters":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, found {meta.get('kind')!r}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        pid, factor, field = name.rsplit("/", 2)
        groups.setdefault(pid, {})[f"{factor}/{field}"] = arr.astype(np.float64)
    adapters = {}
    for pid, g in sorted(groups.items()):
        try:
            A = GaussianMatrix(Tensor(g["A/mu"]), Tensor(g["A/log_sigma"]))
            B = GaussianMatrix(Tensor(g["B/mu"]), Tensor(g["B/log_sigma"]))
        except KeyError as e:
            raise CheckpointError(f"{path}: adapter {pid} lacks tensor {e.args[0]}") from None
        adapters[pid] = LowRankAdapter(A, B, int(meta["rank"]), float(meta["alpha"]), pid)
    return adapters, meta


def _model_dict(cfg: ModelConfig) -> dict:
    from dataclasses import asdict
    return asdict(cfg)
