"""Named-tensor checkpoint files.

Layout (little-endian): magic ``EVCK``, u16 version, then records until EOF:
u16 name length, UTF-8 name, u8 rank, u32 per dimension, float32 values.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from evslt.errors import IoFailure, MalformedFile

MAGIC = b"EVCK"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise MalformedFile("bad checkpoint magic")
    if len(blob) < 6:
        raise MalformedFile("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise MalformedFile("truncated record name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 4 * count
            if end > len(blob):
                raise MalformedFile(f"truncated values for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise MalformedFile(f"truncated checkpoint: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"record name is not UTF-8: {exc}") from exc
    return out


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(blob)
