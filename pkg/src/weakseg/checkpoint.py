"""Deterministic on-disk container for model checkpoints.

Layout: one magic line, one JSON header line (metadata + array manifest),
then the raw little-endian array bytes concatenated in manifest order.
Byte-for-byte reproducible for identical inputs, unlike zip-based formats
that embed timestamps.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datamodel import CheckpointError

MAGIC = b"WSEGCKPT1\n"


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"not a weakseg checkpoint: {path}")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {path}") from exc
        arrays: dict[str, np.ndarray] = {}
        for entry in header.get("arrays", []):
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"truncated checkpoint: {path}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
            arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return header.get("meta", {}), arrays
