"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"QSAM"                      magic
    u32                          format version
    u64 + bytes                  JSON block (architecture + training config, optimizer scalars)
    tensor table                 parameters
    tensor table                 optimizer state
    u64                          iteration
    u64 + bytes                  RNG state
    u32                          CRC-32 of every preceding byte

A tensor table is ``u64 count`` followed, per tensor, by ``u16`` name length, UTF-8 name,
``u8`` rank, ``u64`` per dimension and the float32 payload.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"QSAM"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    rng_state: bytes = b""
    version: int = FORMAT_VERSION


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    body = b"".join(
        [
            MAGIC,
            struct.pack("<I", ckpt.version),
            struct.pack("<Q", len(meta)),
            meta,
            _pack_table(ckpt.params),
            _pack_table(ckpt.optimizer),
            struct.pack("<Q", ckpt.iteration),
            struct.pack("<Q", len(ckpt.rng_state)),
            ckpt.rng_state,
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if n < 0:
            raise ChecksumError(f"negative block length {n}")
        if self.pos + n > self.end:
            raise TruncatedError(f"checkpoint ends after {self.end} bytes, needed {self.pos + n}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<Q")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ChecksumError(f"tensor name is not UTF-8: {exc}") from exc
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}Q")
            n = math.prod(dims)
            payload = self.take(4 * n)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def _parse(buf: bytes, end: int, slack: int = 0) -> Checkpoint:
    """Decode ``buf[:end]``; up to ``slack`` unread bytes may remain (a partially cut checksum)."""
    r = _Reader(buf, end)
    r.take(8)
    (meta_len,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"config block is not valid JSON: {exc}") from exc
    params = r.table()
    optimizer = r.table()
    (iteration,) = r.unpack("<Q")
    (rng_len,) = r.unpack("<Q")
    rng_state = r.take(rng_len)
    if end - r.pos > slack:
        raise ChecksumError(f"{end - r.pos} unexpected trailing bytes before the checksum")
    return Checkpoint(config, params, optimizer, iteration, rng_state, FORMAT_VERSION)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise TruncatedError(f"checkpoint is only {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(buf) >= 12 and zlib.crc32(buf[:-4]) == struct.unpack("<I", buf[-4:])[0]:
        return _parse(buf, len(buf) - 4)
    # Distinguish a cut-off file from a corrupted one: a truncated file cannot be parsed
    # even when every byte is treated as payload.
    try:
        _parse(buf, len(buf), slack=3)
    except TruncatedError:
        raise
    except CheckpointError:
        raise ChecksumError("CRC-32 mismatch: checkpoint is corrupted") from None
    raise TruncatedError("checkpoint is missing its trailing checksum")


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
