"""Flat binary tensor container with a JSON header.

File layout:

    [8 bytes: little-endian uint64 header length n]
    [n bytes: UTF-8 JSON header]
    [payload: concatenated raw tensor bytes]

Header schema::

    {
      "tensors": {name: {"dtype": "<f4", "shape": [..], "offset": int,
                         "nbytes": int}},
      "meta": {...}          # free-form JSON (config echo, step, RNG state)
    }

Offsets are relative to the payload start.  Tensors are written in sorted
name order and the header JSON uses sorted keys, so identical contents
always produce identical bytes (save -> load -> save round-trips exactly).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

_MAGIC_KEY = "format"
_FORMAT_NAME = "crossu-tensors-v1"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus JSON metadata to `path`."""
    entries = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        offset += len(raw)
        blobs.append(raw)
    header = {
        _MAGIC_KEY: _FORMAT_NAME,
        "tensors": entries,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by save_tensors -> (tensors, meta)."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise IntegrityError(f"{path}: truncated container (no header length)")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise IntegrityError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[8 : 8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt JSON header: {exc}") from exc
    if header.get(_MAGIC_KEY) != _FORMAT_NAME:
        raise IntegrityError(f"{path}: not a {_FORMAT_NAME} container")
    payload = data[8 + header_len :]
    tensors = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise IntegrityError(f"{path}: tensor {name!r} extends past payload end")
        arr = np.frombuffer(
            payload[start : start + nbytes], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"])
        tensors[name] = arr.copy()
    return tensors, header.get("meta", {})
