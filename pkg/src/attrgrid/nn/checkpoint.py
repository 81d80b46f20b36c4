"""``TXCKPT1`` checkpoints: named little-endian f32 blobs plus a JSON config block.

Layout::

    b"TXCKPT1\\0"
    u32 meta_len, meta_len bytes of UTF-8 JSON (sorted keys)
    u32 count
    count x (u32 name_len, name, u32 ndim, ndim x u32 dims, prod(dims) x f32)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

CKPT_MAGIC = b"TXCKPT1\x00"


def checkpoint_to_bytes(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(CKPT_MAGIC):
        raise FormatError("TXCKPT1: bad magic")
    pos = len(CKPT_MAGIC)

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError("TXCKPT1: truncated file")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    def read_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("TXCKPT1: truncated file")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = read("<I")
    try:
        meta = json.loads(read_bytes(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("TXCKPT1: unreadable config block") from exc
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = read_bytes(name_len).decode()
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(read_bytes(4 * n), dtype="<f4").reshape(shape)
        if name in params:
            raise FormatError(f"TXCKPT1: duplicate parameter {name!r}")
        params[name] = data.astype(np.float64)
    if pos != len(blob):
        raise FormatError("TXCKPT1: trailing bytes")
    return params, meta


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(params, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
