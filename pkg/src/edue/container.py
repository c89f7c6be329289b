"""EDT1 tensor container: a CRC-guarded binary file of named float arrays.

Layout, all integers unsigned 32-bit little-endian:

    magic  "EDT1"
    count  u32
    entry* { name_len u32, name utf-8, rank u32, extents u32 * rank,
             payload float32-le * prod(extents) }
    crc32  u32 over every preceding byte

Writes go to a temp file in the target directory and are renamed into
place, so readers never observe a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

__all__ = ["ContainerError", "save_container", "load_container", "entry_table",
           "atomic_write_bytes", "atomic_write_text"]

MAGIC = b"EDT1"
_U32 = struct.Struct("<I")


class ContainerError(ValueError):
    """Malformed, truncated, or corrupt container file."""


def _encode(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, _U32.pack(len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ContainerError(f"duplicate entry name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # tobytes() serializes C-order
        chunks.append(_U32.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U32.pack(arr.ndim))
        for extent in arr.shape:
            chunks.append(_U32.pack(extent))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write named float arrays atomically; values are stored as float32."""
    atomic_write_bytes(path, _encode(tensors))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContainerError(f"{self.path}: truncated while reading {what}")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def load_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a container, verifying magic, CRC, and shape arithmetic."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise ContainerError(f"{path}: file too short for a container")
    body, stored = blob[:-4], _U32.unpack(blob[-4:])[0]
    if (zlib.crc32(body) & 0xFFFFFFFF) != stored:
        raise ContainerError(f"{path}: CRC mismatch, file is truncated or corrupt")

    rd = _Reader(body, path)
    if rd.take(4, "magic") != MAGIC:
        raise ContainerError(f"{path}: bad magic, not an EDT1 container")
    count = rd.u32("entry count")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        name_len = rd.u32(f"entry {k} name length")
        name = rd.take(name_len, f"entry {k} name").decode("utf-8")
        if name in out:
            raise ContainerError(f"{path}: duplicate entry name {name!r}")
        rank = rd.u32(f"{name!r} rank")
        extents = tuple(rd.u32(f"{name!r} extent {d}") for d in range(rank))
        numel = 1
        for e in extents:
            numel *= e
        payload = rd.take(numel * 4, f"{name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
    if rd.pos != len(body):
        raise ContainerError(f"{path}: {len(body) - rd.pos} trailing bytes after last entry")
    return out


def entry_table(path: str | os.PathLike) -> list[tuple[str, tuple, int]]:
    """(name, extents, byte size) per entry, for the inspect command."""
    tensors = load_container(path)
    return [(name, arr.shape, arr.size * 4) for name, arr in tensors.items()]
