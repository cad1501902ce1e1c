"""Checkpoint directories: a JSON manifest next to one tensor dump per array."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .autodiff import load_tensor, save_tensor

MANIFEST = "manifest.json"


class ArtifactError(RuntimeError):
    pass


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bytes_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def save_checkpoint(directory, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in arrays.items():
        fname = f"{name}.nrt"
        save_tensor(d / fname, np.asarray(arr))
        files[name] = fname
    body = dict(manifest)
    body["tensors"] = files
    tmp = d / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))
    os.replace(tmp, d / MANIFEST)
    return d


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise ArtifactError(f"no checkpoint manifest in {d}")
    manifest = json.loads(mpath.read_text())
    arrays = {}
    for name, fname in manifest.get("tensors", {}).items():
        if not (d / fname).exists():
            raise ArtifactError(f"checkpoint {d} is missing tensor file {fname}")
        arrays[name] = load_tensor(d / fname)
    return manifest, arrays
