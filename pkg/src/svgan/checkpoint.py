"""Versioned binary parameter files.

Layout (all integers little-endian)::

    b"SVGAN1"
    u32 descriptor length, descriptor (UTF-8 JSON)
    u32 block count
    per block:
        u16 name length, name (UTF-8)
        u8 ndim, u32 * ndim extents
        float32 data (little-endian, C order)
        u32 CRC-32 of name, extents and data bytes
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SVGAN1"


def _block_bytes(name, array):
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = struct.pack("<H", len(encoded)) + encoded
    dims = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = arr.tobytes()
    crc = zlib.crc32(encoded + dims + data)
    return head + dims + data + struct.pack("<I", crc)


def write_checkpoint(path, descriptor, blocks):
    """Atomically write ``descriptor`` (JSON-serialisable) and named float32 arrays."""
    path = Path(path)
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(desc)), desc, struct.pack("<I", len(blocks))]
    parts.extend(_block_bytes(name, arr) for name, arr in blocks.items())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Return ``(descriptor, {name: float32 array})``; raises :class:`CheckpointError` on any defect."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(len(MAGIC), "header")
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise CheckpointError(f"{path}: unsupported checkpoint version {magic[5:]!r}")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (desc_len,) = r.unpack("<I", "descriptor length")
    try:
        descriptor = json.loads(r.take(desc_len, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted descriptor ({exc})") from None
    (count,) = r.unpack("<I", "block count")
    blocks = {}
    for index in range(count):
        (name_len,) = r.unpack("<H", f"block {index} name")
        name_raw = r.take(name_len, f"block {index} name")
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupted name in block {index}") from None
        (ndim,) = r.unpack("<B", f"parameter {name!r}")
        shape = r.unpack(f"<{ndim}I", f"parameter {name!r}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        data = r.take(nbytes, f"parameter {name!r}")
        (crc,) = r.unpack("<I", f"parameter {name!r} checksum")
        dims = struct.pack("<B", ndim) + struct.pack(f"<{ndim}I", *shape)
        if zlib.crc32(name_raw + dims + data) != crc:
            raise CheckpointError(f"{path}: corrupted block for parameter {name!r} (checksum mismatch)")
        blocks[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes after last block")
    return descriptor, blocks
