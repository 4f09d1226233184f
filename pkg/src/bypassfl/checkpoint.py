"""
Binary checkpoint format.

Layout (all integers little-endian)::

    b"BPFL"  u32 version
    u32 len  config-hash (utf-8)
    u32 number of parameter sets
    per set:    u32 len, name, u32 number of entries
    per entry:  u32 len, name, u32 rank, u64 extent * rank, f64 data (row-major)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .nn import ParamSet

MAGIC = b"BPFL"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: str
    sets: dict[str, ParamSet] = field(default_factory=dict)

    def equal(self, other: "Checkpoint") -> bool:
        return (self.config_hash == other.config_hash and list(self.sets) == list(other.sets)
                and all(self.sets[k].equal(other.sets[k]) for k in self.sets))


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.config_hash),
             struct.pack("<I", len(ckpt.sets))]
    for set_name, ps in ckpt.sets.items():
        parts.append(_pack_str(set_name))
        parts.append(struct.pack("<I", len(ps)))
        for name, value in ps.items():
            parts.append(_pack_str(name))
            parts.append(struct.pack("<I", value.ndim))
            parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
            parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic or too short)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint(r.string())
    for _ in range(r.u32()):
        set_name = r.string()
        ps = ParamSet()
        for _ in range(r.u32()):
            name = r.string()
            rank = r.u32()
            shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
            ps.add(name, data.reshape(shape))
        ckpt.sets[set_name] = ps
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after checkpoint payload")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    ckpt = decode(Path(path).read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        warnings.warn(f"checkpoint {path} was written under a different config", stacklevel=2)
    return ckpt
