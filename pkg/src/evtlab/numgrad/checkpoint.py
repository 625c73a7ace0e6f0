"""Flat binary checkpoint archive.

Layout (little-endian)::

    magic    8 bytes  b"NGCKPT\\x00\\x00"
    version  u32
    count    u32      number of array entries
    metalen  u32      length of the JSON metadata blob
    meta     bytes    UTF-8 JSON (config, optimizer step counters, ...)
    entries  count x [u16 name_len, name, u8 ndim, u32 dims..., f64 values...]
    crc32    u32      over every preceding byte

Values are written as raw float64 so a write/read round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NGCKPT\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, len(arrays), len(meta_blob)), meta_blob]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 16 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, count, meta_len = struct.unpack_from("<III", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = len(MAGIC) + 12
    meta = json.loads(body[pos: pos + meta_len].decode("utf-8"))
    pos += meta_len
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos: pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return arrays, meta


def save_store(path, store, optimizers: Mapping | None = None, meta: dict | None = None) -> None:
    """Write every parameter plus the moments of each named Adam instance."""
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict(store.state_dict())
    meta = dict(meta or {})
    steps = {}
    for group, opt in (optimizers or {}).items():
        steps[group] = opt.t
        for p, m, v in zip(opt.params, opt.m, opt.v):
            arrays[f"optim/{group}/m/{p.name}"] = m
            arrays[f"optim/{group}/v/{p.name}"] = v
    meta["optimizer_steps"] = steps
    write_checkpoint(path, arrays, meta)


def load_store(path, store, optimizers: Mapping | None = None) -> dict:
    arrays, meta = read_checkpoint(path)
    store.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim/")})
    for group, opt in (optimizers or {}).items():
        opt.t = int(meta.get("optimizer_steps", {}).get(group, 0))
        for p, m, v in zip(opt.params, opt.m, opt.v):
            m[...] = arrays[f"optim/{group}/m/{p.name}"]
            v[...] = arrays[f"optim/{group}/v/{p.name}"]
    return meta
