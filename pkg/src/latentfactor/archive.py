"""Named tensor archive: a directory with ``manifest.json`` plus one raw
little-endian row-major binary file per tensor.

    {"tensors": [{"name": ..., "dtype": "f32" | "f64", "shape": [...], "file": ...}],
     "metadata": {...}}
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError

MANIFEST = "manifest.json"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class TensorArchive:
    tensors: dict = field(default_factory=dict)
    dtypes: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def add(self, name: str, value, dtype: str = "f64"):
        if dtype not in DTYPES:
            raise ArgumentError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        self.tensors[name] = np.asarray(value, dtype=np.float64)
        self.dtypes[name] = dtype


def _file_name(index: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{index:05d}_{safe}.bin"


def save_archive(archive: TensorArchive, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(sorted(archive.tensors)):
        arr = np.asarray(archive.tensors[name])
        dtype = archive.dtypes.get(name, "f64")
        if dtype not in DTYPES:
            raise ArgumentError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        fname = _file_name(i, name)
        data = np.ascontiguousarray(arr, dtype=DTYPES[dtype])
        (path / fname).write_bytes(data.tobytes(order="C"))
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "file": fname})
    manifest = {"tensors": entries, "metadata": archive.metadata}
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return path


def load_archive(path) -> TensorArchive:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"{path} has no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{mpath}: invalid manifest ({exc})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise FormatError(f"{mpath}: manifest needs a 'tensors' list")
    out = TensorArchive(metadata=manifest.get("metadata") or {})
    for entry in manifest["tensors"]:
        try:
            name, dtype, shape, fname = entry["name"], entry["dtype"], entry["shape"], entry["file"]
        except (KeyError, TypeError):
            raise FormatError(f"{mpath}: malformed tensor entry {entry!r}") from None
        if name in out.tensors:
            raise FormatError(f"{mpath}: duplicate tensor name {name!r}")
        if dtype not in DTYPES:
            raise FormatError(f"{mpath}: tensor {name!r} has unknown dtype {dtype!r}")
        if not isinstance(shape, list) or any(
            not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in shape
        ):
            raise FormatError(f"{mpath}: tensor {name!r} has invalid shape {shape!r}")
        fpath = path / fname
        if not fpath.is_file():
            raise FormatError(f"{mpath}: payload {fname!r} for {name!r} is missing")
        raw = fpath.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[dtype].itemsize
        if len(raw) != expected:
            raise FormatError(
                f"payload for {name!r} has {len(raw)} bytes, manifest implies {expected}"
            )
        arr = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).astype(np.float64)
        out.tensors[name] = arr
        out.dtypes[name] = dtype
    return out
