"""Checkpoint archive: a zip with ``manifest.json`` and one raw array file per tensor.

The manifest records the format version, the model and training configs,
JSON trainer state and, per array, its shape, dtype (little-endian) and
SHA-256 digest. Entries carry a fixed timestamp so identical content gives
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpoint, IoFailure, VersionMismatch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    return info


def _to_numpy(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<")))


def save_archive(path, arrays: dict, meta: dict) -> Path:
    """Write named arrays plus JSON metadata; float tensors are stored as float32."""
    path = Path(path)
    index = {}
    blobs = []
    for i, (name, value) in enumerate(sorted(arrays.items())):
        arr = _to_numpy(value)
        raw = arr.tobytes()
        fname = f"arrays/{i:05d}.bin"
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": arr.dtype.str, "sha256": hashlib.sha256(raw).hexdigest()}
        blobs.append((fname, raw))
    manifest = {"format_version": FORMAT_VERSION, **meta, "arrays": index}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w") as zf:
            zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
            for fname, raw in blobs:
                zf.writestr(_entry(fname), raw)
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version is None:
                raise CorruptCheckpoint("manifest has no format_version")
            if version != FORMAT_VERSION:
                raise VersionMismatch(f"checkpoint format {version}, this code reads {FORMAT_VERSION}")
            arrays = {}
            for name, info in manifest["arrays"].items():
                raw = zf.read(info["file"])
                if hashlib.sha256(raw).hexdigest() != info["sha256"]:
                    raise CorruptCheckpoint(f"checksum mismatch for {name}")
                arrays[name] = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError) as exc:
        if isinstance(exc, (VersionMismatch, CorruptCheckpoint)):
            raise
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    meta = {k: v for k, v in manifest.items() if k != "arrays"}
    return arrays, meta
