"""DNEPACK binary containers, JSON helpers and atomic file writes.

A DNEPACK file is the 8-byte magic ``DNEPACK1``, a 4-byte little-endian
header length, a UTF-8 JSON header, then raw row-major float32 little-endian
data. Feature grids use ``kind="feature_grid"`` with a single ``shape``;
checkpoints use ``kind="checkpoint"`` and list ``tensors`` as
``[{"name", "shape"}, ...]`` stored back to back in that order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DNEPACK1"
DTYPE = "f32le"
_F32 = np.dtype("<f4")


class PackError(ValueError):
    """Malformed or unexpected DNEPACK content."""


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path, "rb") as f:
        return json.loads(f.read().decode())


def _pack(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def _unpack(blob: bytes):
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise PackError("bad magic")
    (n,) = struct.unpack("<I", blob[8:12])
    if 12 + n > len(blob):
        raise PackError("truncated header")
    try:
        header = json.loads(blob[12:12 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PackError(f"unreadable header: {e}") from None
    if header.get("dtype") != DTYPE:
        raise PackError(f"unsupported dtype {header.get('dtype')!r}")
    return header, blob[12 + n:]


def _to_f32(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise PackError("refusing to store non-finite values")
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


def encode_grid(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 3:
        raise PackError("feature grid must be H x W x C")
    return _pack({"shape": list(values.shape), "dtype": DTYPE, "kind": "feature_grid"}, _to_f32(values))


def decode_grid(blob: bytes) -> np.ndarray:
    header, payload = _unpack(blob)
    if header.get("kind") != "feature_grid":
        raise PackError(f"expected a feature_grid, got {header.get('kind')!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(payload) != 4 * int(np.prod(shape)):
        raise PackError("payload size does not match shape")
    return np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float64)


def encode_checkpoint(tensors: dict, meta: dict | None = None) -> bytes:
    """``tensors`` maps names to arrays; order is sorted by name for stable bytes."""
    names = sorted(tensors)
    header = {"dtype": DTYPE, "kind": "checkpoint",
              "tensors": [{"name": k, "shape": list(np.shape(tensors[k]))} for k in names]}
    if meta:
        header["meta"] = meta
    return _pack(header, b"".join(_to_f32(tensors[k]) for k in names))


def decode_checkpoint(blob: bytes):
    """Returns ``(tensors, meta)``."""
    header, payload = _unpack(blob)
    if header.get("kind") != "checkpoint":
        raise PackError(f"expected a checkpoint, got {header.get('kind')!r}")
    out, pos = {}, 0
    for t in header["tensors"]:
        shape = tuple(int(s) for s in t["shape"])
        n = 4 * int(np.prod(shape))
        if pos + n > len(payload):
            raise PackError(f"truncated tensor {t['name']!r}")
        out[t["name"]] = np.frombuffer(payload[pos:pos + n], dtype=_F32).reshape(shape).astype(np.float64)
        pos += n
    if pos != len(payload):
        raise PackError("trailing bytes after last tensor")
    return out, header.get("meta", {})


def save_grid(path, values) -> None:
    atomic_write(path, encode_grid(values))


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_grid(f.read())


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
