"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"DGZ1"  u8 version(=1)  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, prod(dims) x f32 }
    u32 CRC32 of every preceding byte

Non-tensor state (config text, counters) is stored as ordinary f32 entries
under the ``meta/`` prefix; see ``encode_text``.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DGZ1"
VERSION = 1
# numpy refuses arrays of higher rank
MAX_RANK = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8).tolist()).decode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<BI", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim > MAX_RANK:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(buf: bytes) -> Checkpoint:
    n = len(buf)

    def need(off: int, size: int, what: str) -> None:
        if off + size > n:
            raise CheckpointError(
                f"truncated checkpoint: {what} at byte {off} needs {size} bytes, "
                f"expected at least {off + size} bytes total, file has {n}")

    need(0, 9, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte 0 (expected {MAGIC!r})")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4 (expected {VERSION})")
    off = 9
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        need(off, 2, f"name length of entry {i}")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, f"name of entry {i}")
        try:
            name = buf[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i}: name at byte {off} is not UTF-8") from exc
        off += nlen
        rank = buf[off]
        if rank > MAX_RANK:
            raise CheckpointError(f"entry {name!r}: rank {rank} at byte {off} exceeds {MAX_RANK}")
        off += 1
        need(off, 4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = 4 * math.prod(dims)
        need(off, size, f"payload of {name!r}")
        try:
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).astype(np.float32).reshape(dims)
        except ValueError as exc:
            raise CheckpointError(f"entry {name!r}: shape {dims} at byte {off - 4 * rank} is not valid ({exc})") from exc
        off += size
    need(off, 4, "CRC footer")
    if off + 4 != n:
        raise CheckpointError(f"trailing data: entries end at byte {off + 4}, file has {n} bytes")
    (crc,) = struct.unpack_from("<I", buf, off)
    actual = zlib.crc32(buf[:off]) & 0xFFFFFFFF
    if crc != actual:
        raise CheckpointError(f"CRC mismatch at byte {off}: stored {crc:#010x}, computed {actual:#010x}")
    return Checkpoint(tensors, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: a failed write never clobbers an existing file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
