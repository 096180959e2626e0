"""Binary checkpoint container.

Layout (all little-endian)::

    b"HMCKPT\\x00\\x00"        magic, 8 bytes
    uint32 version            currently 1
    uint32 meta_len, bytes    UTF-8 JSON metadata
    uint32 n_params
    per parameter:
        uint16 name_len, bytes  UTF-8 name
        uint8 ndim, uint32[ndim] shape
        uint64 adam_step
        float64[n] data, float64[n] adam m, float64[n] adam v   (row-major)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import DiffValue
from .optim import AdamState

MAGIC = b"HMCKPT\x00\x00"
VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, DiffValue], states: dict[str, AdamState] | None = None,
                    meta: dict | None = None) -> None:
    states = states or {}
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode()
        st = states.get(name)
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(struct.pack("<Q", st.step if st else 0))
        zeros = np.zeros(p.shape)
        for arr in (p.data, st.m if st else zeros, st.v if st else zeros):
            chunks.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, dict], dict]:
    """Return (param arrays, adam state fields per param, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + mlen].decode())
    pos += mlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays, moments = {}, {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode()
        pos += nl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (step,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        size = int(np.prod(shape)) if ndim else 1
        out = []
        for _ in range(3):
            out.append(np.frombuffer(buf, dtype=_F64, count=size, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * size
        arrays[name] = out[0]
        moments[name] = {"m": out[1], "v": out[2], "step": step}
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, moments, meta
