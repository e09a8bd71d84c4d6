"""Parameter store: JSON header followed by little-endian raw arrays.

Layout::

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON {"metadata": {...}, "tensors": {name: {dtype, shape, offsets}}}
    [...]      concatenated array bytes; offsets are relative to the end of the header
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import CheckpointError

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_parameters(path: Path, params: Mapping[str, np.ndarray], metadata: Mapping[str, Any]) -> None:
    path = Path(path)
    entries: dict[str, dict[str, Any]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, array in params.items():
        dtype_name = np.dtype(array.dtype).name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {dtype_name} for {name}")
        blob = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes()
        entries[name] = {
            "dtype": dtype_name,
            "shape": list(array.shape),
            "offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"metadata": dict(metadata), "tensors": entries}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_metadata(path: Path) -> dict[str, Any]:
    header, _ = _read_header(Path(path))
    return header["metadata"]


def load_parameters(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    header, body = _read_header(path)
    params: dict[str, np.ndarray] = {}
    for name, entry in header["tensors"].items():
        try:
            start, end = entry["offsets"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed tensor entry {name!r}") from e
        if end > len(body) or start < 0 or end < start:
            raise CheckpointError(f"{path}: tensor {name!r} extends past end of file")
        array = np.frombuffer(body[start:end], dtype=dtype)
        if array.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {name!r} has {array.size} values, shape {shape}")
        params[name] = array.reshape(shape).astype(entry["dtype"])
    return params, header["metadata"]


def _read_header(path: Path) -> tuple[dict[str, Any], bytes]:
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: file too short to hold a header")
    (length,) = struct.unpack("<Q", raw[:8])
    if 8 + length > len(raw):
        raise CheckpointError(f"{path}: header length {length} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({e})") from e
    if not isinstance(header, dict) or "tensors" not in header or "metadata" not in header:
        raise CheckpointError(f"{path}: checkpoint header lacks 'tensors'/'metadata'")
    if not isinstance(header["tensors"], dict) or not isinstance(header["metadata"], dict):
        raise CheckpointError(f"{path}: corrupt checkpoint header")
    return header, raw[8 + length :]
