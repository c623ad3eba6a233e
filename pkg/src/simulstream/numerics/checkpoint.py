"""Checkpoint directories: ``manifest.json`` plus a flat little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "simulstream-ckpt-v1"
MANIFEST = "manifest.json"
BLOB = "values.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``tensors`` in insertion order.  ``meta`` must be JSON-serialisable."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.reshape(-1).tobytes())
    manifest = {"format": FORMAT, "dtype": "float64-le", "count": offset,
                "tensors": entries, "meta": meta or {}}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    raw = (path / BLOB).read_bytes()
    flat = np.frombuffer(raw, dtype="<f8")
    if flat.size != manifest["count"]:
        raise CheckpointError(f"value blob holds {flat.size} values, manifest says {manifest['count']}")
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].astype(np.float64).reshape(tuple(e["shape"]))
    return out, manifest["meta"]
