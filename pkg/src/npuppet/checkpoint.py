"""Flat binary parameter checkpoints.

Layout: magic "NPUP", version u32, tensor count u32, then per tensor
(name length u16, name bytes, rank u8, dims u32 each, data f64
little-endian, row-major). Tensors are written in dict order so a fixed
parameter ordering yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"NPUP"
VERSION = 1


def save_params(path, params: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(params))
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", a.ndim)  # before ascontiguousarray, which promotes 0-d to 1-d
        for d in a.shape:
            buf += struct.pack("<I", d)
        buf += np.ascontiguousarray(a).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a parameter checkpoint (bad magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        params[name] = arr
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes after last tensor")
    return params


def params_digest(params: dict[str, np.ndarray]) -> str:
    """Stable content hash used in logs and manifests."""
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
