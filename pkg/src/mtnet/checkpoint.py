"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MTNC" | u32 version | u64 blob length | UTF-8 JSON blob | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank (=2) | u64 rows | u64 cols | f64 values
    u64 CRC-64 of every preceding byte

The JSON blob carries the model config plus optional optimizer scalars, RNG
state and vocabulary. Optimizer moments are stored as ordinary tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MTNC"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"unsupported checkpoint version: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class TruncatedError(CheckpointError):
    pass


class CorruptError(CheckpointError):
    pass


def _crc_table() -> list:
    poly = 0xC96C5795D7870F42  # CRC-64/XZ, reflected ECMA-182 polynomial
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict = field(default_factory=dict)  # name -> float64 array

    @property
    def config(self) -> dict:
        return self.meta["config"]


def encode(meta: dict, tensors: dict) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"tensor {name!r} is not 2-D")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BQQ", 2, *arr.shape),
                  np.ascontiguousarray(arr).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(VERSION, version)
    (blob_len,) = r.unpack("<Q", "config length")
    try:
        meta = json.loads(r.take(blob_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptError(f"config blob is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8", errors="strict")
        rank, rows, cols = r.unpack("<BQQ", f"header of tensor {name!r}")
        if rank != 2:
            raise CorruptError(f"tensor {name!r} has rank {rank}, expected 2")
        if name in tensors:
            raise CorruptError(f"duplicate tensor name {name!r}")
        raw = r.take(8 * rows * cols, f"values of tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    end = r.pos
    (stored,) = r.unpack("<Q", "checksum")
    if r.pos != len(data):
        raise CorruptError(f"{len(data) - r.pos} trailing bytes after checksum")
    if crc64(data[:end]) != stored:
        raise CorruptError("checksum mismatch")
    return Checkpoint(meta, tensors)


def save_checkpoint(model, path, optimizer=None, rng: Optional[np.random.Generator] = None,
                    vocab_tokens: Optional[list] = None, extra: Optional[dict] = None) -> None:
    tensors = {name: t.data for name, t in model.named_parameters()}
    meta = {"config": model.config.to_dict(), "vocab": vocab_tokens, "extra": extra or {}}
    if optimizer is not None:
        meta["optimizer"] = optimizer.scalars()
        for name, (m, v) in optimizer.moments().items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    if rng is not None:
        meta["rng"] = rng.bit_generator.state
    Path(path).write_bytes(encode(meta, tensors))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(data)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model described by a checkpoint and load its weights."""
    from .config import ModelConfig
    from .mtn import build_model

    config = ModelConfig.from_dict(ckpt.config)
    model = build_model(config, np.random.default_rng(0))
    for name, t in model.named_parameters():
        if name not in ckpt.tensors:
            raise CorruptError(f"checkpoint lacks parameter {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != t.shape:
            raise CorruptError(f"parameter {name!r}: stored {arr.shape}, model expects {t.shape}")
        t.data = arr.copy()
    return model


def restore_rng(ckpt: Checkpoint) -> Optional[np.random.Generator]:
    state = ckpt.meta.get("rng")
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
