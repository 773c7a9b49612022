"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   8 bytes  b"FSASDCKP"
    version u32
    meta    u32 length + UTF-8 JSON (sorted keys)
    count   u32
    entries count x { u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
                      prod(dims) x float64 LE }

Entries hold trainable parameters followed by fixed buffers (``input.*``).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterVector

MAGIC = b"FSASDCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ParameterVector, buffers: dict[str, np.ndarray] | None = None,
          meta: dict | None = None) -> bytes:
    buffers = buffers or {}
    clash = set(buffers) & set(params.names())
    if clash:
        raise ValueError(f"buffer names collide with parameters: {sorted(clash)}")
    meta = dict(meta or {})
    meta["parameters"] = params.names()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    entries = list(params.items()) + [(k, np.asarray(v, dtype=np.float64)) for k, v in buffers.items()]
    out.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads(data: bytes) -> tuple[ParameterVector, dict[str, np.ndarray], dict]:
    """Parse checkpoint bytes into (params, buffers, meta)."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint (needed {n} bytes at offset {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (bad magic {magic!r}); expected format version {VERSION}")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads version {VERSION}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata (version {version}): {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt entry name (version {version}): {exc}") from exc
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        entries.append((name, arr))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint (version {version})")
    names = meta.get("parameters")
    if names is None:
        raise CheckpointError("checkpoint metadata lacks the parameter list")
    param_entries = [(n, a) for n, a in entries if n in set(names)]
    if [n for n, _ in param_entries] != names:
        raise CheckpointError("checkpoint parameter list does not match its entries")
    buffers = {n: a for n, a in entries if n not in set(names)}
    return ParameterVector(param_entries), buffers, meta


def save(path: str | Path, params: ParameterVector, buffers=None, meta=None) -> None:
    Path(path).write_bytes(dumps(params, buffers, meta))


def load(path: str | Path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
