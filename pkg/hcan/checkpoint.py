#!/usr/bin/env python3
"""
Binary checkpoint codec.

Layout: the 5 magic bytes ``HCAN1``, an 8-byte little-endian manifest length,
the UTF-8 JSON manifest, then every tensor as little-endian float32 in
manifest order. Reading validates the whole file before returning anything.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"HCAN1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_BLOB_DTYPE = np.dtype("<f4")


def write_checkpoint(path: Union[str, Path], manifest: Dict[str, Any],
                     tensors: Dict[str, np.ndarray]) -> Path:
    """Write ``manifest`` plus ``tensors`` atomically; returns the written path."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += int(data.size)

    doc = dict(manifest)
    doc["format_version"] = FORMAT_VERSION
    doc["tensors"] = entries
    header = json.dumps(doc, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(_LENGTH.pack(len(header)))
            f.write(header)
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} ({len(entries)} tensors)")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: unsupported checkpoint version (bad magic header)")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated checkpoint (no manifest length)")
    (length,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < start + length:
        raise CheckpointError(f"{path}: truncated checkpoint (manifest needs {length} bytes)")
    try:
        manifest = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")

    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest has no tensor table")
    blob = raw[start + length:]
    total = 0
    for entry in entries:
        count = int(np.prod(entry.get("shape", []), dtype=np.int64))
        if entry.get("offset") != total or entry.get("count") != count:
            raise CheckpointError(f"{path}: manifest/blob length disagreement at tensor {entry.get('name')!r}")
        total += count
    expected = total * _BLOB_DTYPE.itemsize
    if len(blob) != expected:
        kind = "truncated checkpoint" if len(blob) < expected else "manifest/blob length disagreement"
        raise CheckpointError(f"{path}: {kind} (blob has {len(blob)} bytes, manifest needs {expected})")

    values = np.frombuffer(blob, dtype=_BLOB_DTYPE)
    tensors = {
        entry["name"]: values[entry["offset"]:entry["offset"] + entry["count"]].reshape(entry["shape"]).copy()
        for entry in entries
    }
    return manifest, tensors
