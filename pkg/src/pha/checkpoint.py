"""Single-file checkpoint format: JSON manifest line, then a float64 blob.

The first line of the file is a JSON manifest listing parameter names,
shapes, and byte offsets into the blob that follows. The blob is the
parameters' little-endian 64-bit floats concatenated in manifest order.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

SCHEMA = 1


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"schema": SCHEMA, "meta": meta, "params": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("schema") != SCHEMA:
        raise ContractError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return manifest["meta"], params


def restore_into(named: Mapping[str, Tensor], stored: Mapping[str, np.ndarray],
                 prefix: str = "") -> None:
    """Copy stored arrays into live tensors; shapes must match exactly."""
    for name, t in named.items():
        key = prefix + name
        if key not in stored:
            raise ContractError(f"checkpoint is missing parameter {key!r}")
        arr = stored[key]
        if arr.shape != t.data.shape:
            raise ContractError(
                f"checkpoint shape {arr.shape} != live shape {t.data.shape} for {key!r}")
        t.data[...] = arr
