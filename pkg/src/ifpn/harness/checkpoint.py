"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"IFPNCKPT"
    version      u32
    digest       32 bytes  sha256 of the canonical JSON config
    config_len   u32, then config_len bytes of UTF-8 JSON
    step         u64
    n_segments   u32
    per segment:
        name_len u16, name (UTF-8)
        ndim     u8, dims u64 * ndim
        data     float64 little-endian, row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import ParamSet
from ..transform import PyramidTransform
from .config import ExperimentConfig
from .model import Model

MAGIC = b"IFPNCKPT"
VERSION = 1
GROUPS = ("encoder", "transform", "head")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder: ParamSet
    transform: ParamSet
    head: ParamSet
    config: ExperimentConfig
    step: int = 0

    def model(self) -> Model:
        return Model(self.encoder, PyramidTransform(self.config.transform, self.transform), self.head)

    @classmethod
    def from_model(cls, model: Model, config: ExperimentConfig, step: int) -> "Checkpoint":
        return cls(model.encoder, model.transform.params, model.head, config, step)


def dumps(ckpt: Checkpoint) -> bytes:
    cfg_json = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.config.digest(),
             struct.pack("<I", len(cfg_json)), cfg_json, struct.pack("<Q", ckpt.step)]
    segments = [(f"{g}/{k}", v) for g in GROUPS for k, v in getattr(ckpt, g).items()]
    parts.append(struct.pack("<I", len(segments)))
    for name, arr in segments:
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    config = ExperimentConfig.from_dict(json.loads(r.take(r.unpack("<I")).decode()))
    if config.digest() != digest:
        raise CheckpointError("config digest mismatch")
    step = r.unpack("<Q")
    groups: dict[str, list] = {g: [] for g in GROUPS}
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode()
        shape = tuple(r.unpack("<Q") for _ in range(r.unpack("<B")))
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown segment group {group!r}")
        groups[group].append((key, arr))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last segment")
    return Checkpoint(ParamSet(groups["encoder"]), ParamSet(groups["transform"]),
                      ParamSet(groups["head"]), config, step)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
