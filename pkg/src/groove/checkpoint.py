"""Versioned checkpoint files.

Layout: a single ``.npz`` archive. Every array is stored under its own key;
the key ``__manifest__`` holds UTF-8 JSON with the format version, the shape
and dtype of every array, a SHA-256 over the array bytes, and arbitrary
JSON metadata. Files are written to a temporary name and renamed, so a
crash never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


class CheckpointError(RuntimeError):
    pass


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if MANIFEST_KEY in arrays:
        raise CheckpointError(f"{MANIFEST_KEY} is reserved")
    manifest = {
        "version": FORMAT_VERSION,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
        "sha256": _digest(arrays),
        "meta": meta,
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, **{MANIFEST_KEY: blob}, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays, meta); raises CheckpointError on any inconsistency."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if MANIFEST_KEY not in data:
        raise CheckpointError(f"{path}: missing manifest")
    try:
        manifest = json.loads(data.pop(MANIFEST_KEY).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('version')} "
                              f"(expected {FORMAT_VERSION})")
    expected = manifest["arrays"]
    if set(expected) != set(data):
        raise CheckpointError(f"{path}: array set differs from manifest")
    for k, spec in expected.items():
        if list(data[k].shape) != spec["shape"] or str(data[k].dtype) != spec["dtype"]:
            raise CheckpointError(f"{path}: array {k!r} does not match its manifest entry")
    if _digest(data) != manifest["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return data, manifest["meta"]
