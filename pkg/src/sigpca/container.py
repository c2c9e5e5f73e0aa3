"""Manifest + raw blob storage shared by every on-disk artifact.

An artifact directory holds ``manifest.json`` and ``data.bin``.  The blob is a
concatenation of little-endian float64 arrays in C order; the manifest lists
each array's name, shape and element offset.  Artifact-specific metadata lives
alongside the array table in the manifest.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "data.bin"
_LE_F64 = np.dtype("<f8")


class ContainerError(ValueError):
    """Raised for malformed or inconsistent artifact directories."""


def write_artifact(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes(order="C"))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "byte_order": "LE",
        "dtype": "f64",
        **meta,
        "arrays": table,
    }
    # write blob first so a manifest never points at a missing/partial blob
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise ContainerError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("byte_order", "LE") != "LE" or manifest.get("dtype", "f64") != "f64":
        raise ContainerError(f"unsupported encoding in {mpath}")
    return manifest


def read_artifact(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = read_manifest(path)
    bpath = path / BLOB
    if not bpath.is_file():
        raise ContainerError(f"missing blob: {bpath}")
    raw = bpath.read_bytes()
    table = manifest.get("arrays", [])
    expected = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in table)
    if len(raw) != 8 * expected:
        raise ContainerError(
            f"blob size mismatch in {path}: {len(raw)} bytes, manifest implies {8 * expected}"
        )
    flat = np.frombuffer(raw, dtype=_LE_F64)
    arrays = {}
    for t in table:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float64)
    return manifest, arrays
