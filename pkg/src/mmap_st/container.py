"""Versioned single-file array container used for checkpoints and banks.

Layout::

    b"MMAPCKPT-1\\n"
    uint64 (little-endian) manifest byte length
    manifest: UTF-8 JSON {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
    raw little-endian array bytes, offsets relative to the end of the manifest
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MMAPCKPT-1\n"
_ALLOWED = {"f4", "f8", "i4", "i8", "u1", "b1"}


def _le(arr):
    arr = np.ascontiguousarray(arr)
    code = arr.dtype.kind + str(arr.dtype.itemsize)
    if code not in _ALLOWED:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    if arr.dtype.itemsize > 1:
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return arr, ("<" if arr.dtype.itemsize > 1 else "|") + code


def write_container(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray, order preserved) plus JSON ``meta``."""
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr, dtype = _le(np.asarray(value))
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "arrays": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def read_container(path):
    """Return ``(arrays, meta)``; arrays keep the order they were written in."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"file not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an MMAPCKPT-1 container")
    pos = len(MAGIC)
    try:
        (mlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    base = pos + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]
