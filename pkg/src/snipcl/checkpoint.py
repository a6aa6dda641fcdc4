"""Parameter trees <-> a JSON manifest plus one contiguous little-endian f32 blob."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .io_utils import atomic_write_bytes, atomic_write_text
from .tensor import Tensor

MANIFEST = "checkpoint.json"
BLOB = "params.f32"
FORMAT_VERSION = 1
ITEMSIZE = 4


@dataclass
class Checkpoint:
    """``trees`` maps a group name (``query``, ``key``, ``model``...) to a parameter tree."""

    trees: dict = field(default_factory=dict)
    config: str = ""  # serialized RunConfig
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _entries(trees: dict) -> tuple[list[dict], list[np.ndarray]]:
    entries, arrays = [], []
    offset = 0
    for group in sorted(trees):
        for name in sorted(trees[group]):
            value = trees[group][name]
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            arrays.append(arr)
            offset += arr.nbytes
    return entries, arrays


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, arrays = _entries(ckpt.trees)
    blob = b"".join(a.tobytes() for a in arrays)
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float32-le",
        "blob_bytes": len(blob),
        "tensors": entries,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    atomic_write_bytes(path / BLOB, blob)
    atomic_write_text(path / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _check_layout(entries: list[dict], blob_bytes: int, where: Path) -> None:
    end = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        nbytes = int(np.prod(e["shape"], dtype=np.int64)) * ITEMSIZE
        if e["offset"] < end:
            raise FormatError(f"{where}: tensor {e['group']}/{e['name']} overlaps the previous one")
        end = e["offset"] + nbytes
        if end > blob_bytes:
            raise FormatError(f"{where}: tensor {e['group']}/{e['name']} ends at byte {end}, "
                              f"past the declared blob size {blob_bytes}")


def load_checkpoint(path, requires_grad: bool = True) -> Checkpoint:
    path = Path(path)
    mpath, bpath = path / MANIFEST, path / BLOB
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise FormatError(f"{mpath}: cannot read checkpoint manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: corrupted manifest at offset {exc.pos}: {exc.msg}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: unsupported checkpoint version {manifest.get('version')!r}")
    try:
        blob = bpath.read_bytes()
    except OSError as exc:
        raise FormatError(f"{bpath}: cannot read parameter blob: {exc}") from exc
    expected = int(manifest["blob_bytes"])
    if len(blob) != expected:
        raise FormatError(f"{bpath}: blob is {len(blob)} bytes, expected {expected}")
    entries = manifest["tensors"]
    _check_layout(entries, expected, mpath)
    trees: dict = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        trees.setdefault(e["group"], {})[e["name"]] = Tensor(
            arr.astype(np.float64).reshape(e["shape"]), requires_grad=requires_grad)
    return Checkpoint(trees=trees, config=manifest.get("config", ""),
                      rng_state=manifest.get("rng_state"), meta=manifest.get("meta", {}))
