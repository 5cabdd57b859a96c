"""Checkpoint directories: ``manifest.json`` plus one little-endian tensor blob."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .model import EncoderConfig, Weights

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"

_DTYPES = {"f32": ("<f4", torch.float32), "f64": ("<f8", torch.float64)}
_NAME_OF = {torch.float32: "f32", torch.float64: "f64"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    weights: Weights
    config: EncoderConfig
    metadata: dict[str, Any] = field(default_factory=dict)


def seed_child(seed: int, label: str) -> int:
    """Derive a sub-seed from a global seed and a label (stable across runs)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _atomic_replace_dir(tmp: Path, dest: Path) -> None:
    if dest.exists():
        old = dest.with_name(dest.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(dest, old)
        os.replace(tmp, dest)
        shutil.rmtree(old)
    else:
        os.replace(tmp, dest)


def save_checkpoint(
    weights: Weights,
    config: EncoderConfig,
    path: str | Path,
    metadata: Optional[dict] = None,
    dtype: str = "f32",
) -> Path:
    """Write ``path`` (a directory) atomically. Tensors go to one contiguous
    blob in canonical name order; the manifest records dtype/shape/offset."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    np_dtype, _ = _DTYPES[dtype]
    dest = Path(path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    try:
        tensors = {}
        offset = 0
        with open(tmp / BLOB, "wb") as fh:
            for name in sorted(weights):
                arr = weights[name].detach().cpu().numpy().astype(np_dtype, copy=False)
                buf = np.ascontiguousarray(arr).tobytes()
                fh.write(buf)
                tensors[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
                offset += len(buf)
            fh.flush()
            os.fsync(fh.fileno())
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": config.to_dict(),
            "metadata": metadata or {},
            "tensors": tensors,
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        _atomic_replace_dir(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return dest


def load_checkpoint(path: str | Path, dtype: Optional[torch.dtype] = None) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != {FORMAT_VERSION}")
    weights: Weights = {}
    for name, entry in manifest["tensors"].items():
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype {entry['dtype']!r}")
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        itemsize = np.dtype(np_dtype).itemsize
        shape = tuple(entry["shape"])
        nbytes = math.prod(shape) * itemsize
        start = entry["offset"]
        if nbytes != entry.get("nbytes", nbytes) or start < 0 or start + nbytes > len(blob):
            raise CheckpointError(f"tensor {name}: shape {list(shape)} does not fit the blob")
        arr = np.frombuffer(blob, dtype=np_dtype, count=math.prod(shape), offset=start).reshape(shape)
        t = torch.from_numpy(arr.copy())
        weights[name] = t.to(dtype) if dtype is not None else t.to(torch_dtype)
    config = EncoderConfig.from_dict(manifest["config"])
    return Checkpoint(weights, config, manifest.get("metadata", {}))


def tensor_bytes(weights: Weights) -> dict[str, bytes]:
    """Raw bytes per tensor, for exact comparisons."""
    return {k: v.detach().cpu().contiguous().numpy().tobytes() for k, v in weights.items()}


def weights_equal(a: Weights, b: Weights) -> bool:
    return a.keys() == b.keys() and tensor_bytes(a) == tensor_bytes(b)
