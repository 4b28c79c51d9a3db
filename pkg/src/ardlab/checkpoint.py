"""Flat binary checkpoint format for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"ARDW"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor, in insertion order:
      name_len u16, name bytes (UTF-8),
      rank u8, rank x extent u32,
      payload: prod(extents) float32, little-endian, C order

Round trips are byte exact: save(load(p)) reproduces p bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"ARDW"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise LoadError(f"tensor name too long: {name[:40]}...")
        if a.ndim > 0xFF:
            raise LoadError(f"tensor rank {a.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise LoadError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = buf[off:off + 4 * n]
            if len(payload) != 4 * n:
                raise LoadError(f"{path}: truncated payload for tensor {name!r}")
            off += 4 * n
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    except (struct.error, UnicodeDecodeError) as e:
        raise LoadError(f"{path}: corrupt checkpoint ({e})") from None
    if off != len(buf):
        raise LoadError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return out
