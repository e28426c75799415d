"""Checkpoints: a text manifest plus one blob of little-endian float32 values."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict | None = None, name: str = "") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for key in tensors:
        t = tensors[key].detach().cpu()
        if not t.is_floating_point():
            raise CheckpointError(f"tensor {key!r} is {t.dtype}; checkpoints hold floats only")
        raw = t.contiguous().numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": key, "shape": list(t.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": name,
        "config": config or {},
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Returns (tensors, manifest); the blob hash is verified first."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"blob hash mismatch for {path}")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))
    return tensors, manifest
