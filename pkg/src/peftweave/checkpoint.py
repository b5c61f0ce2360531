"""Single-file tensor container.

Layout::

    magic  b"PWCK"           4 bytes
    version                  uint16 LE
    reserved                 uint16 LE (zero)
    manifest length          uint64 LE
    manifest                 UTF-8 JSON: {"tensors": [...], "metadata": {...}}
    payload                  raw little-endian tensor bytes

Each manifest entry carries ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes``; offsets are relative to the start of the payload section.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

MAGIC = b"PWCK"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, Tensor], metadata: Optional[dict] = None) -> None:
    """Write atomically: a partially written file never replaces a good one."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise TypeError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        dname = _TORCH_TO_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        entries.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_manifest(path) -> Tuple[list, dict, int]:
    """Parse and validate the header and manifest without touching payloads.

    Returns ``(entries, metadata, payload_start)``.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CheckpointFormatError(f"{path}: truncated header")
        magic, version, _, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported format version {version}")
        raw = fh.read(mlen)
    if len(raw) < mlen:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON") from None
    start = _HEADER.size + mlen
    payload = size - start
    seen = set()
    for e in manifest.get("tensors", []):
        name = e.get("name")
        if name in seen:
            raise CheckpointFormatError(f"{path}: duplicate tensor {name!r}")
        seen.add(name)
        if e.get("dtype") not in _DTYPES:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unknown dtype {e.get('dtype')!r}")
        itemsize = np.dtype(_DTYPES[e["dtype"]][1]).itemsize
        if e["nbytes"] != int(np.prod(e["shape"], dtype=np.int64)) * itemsize:
            raise CheckpointFormatError(f"{path}: tensor {name!r} byte length disagrees with its shape")
        if e["offset"] < 0 or e["offset"] + e["nbytes"] > payload:
            raise CheckpointFormatError(f"{path}: truncated payload for tensor {name!r}")
    return manifest.get("tensors", []), manifest.get("metadata", {}), start


def load_tensors(path) -> Tuple[Dict[str, Tensor], dict]:
    entries, metadata, start = read_manifest(path)
    out: Dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        for e in entries:
            fh.seek(start + e["offset"])
            raw = fh.read(e["nbytes"])
            arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]][1]).reshape(e["shape"])
            out[e["name"]] = torch.from_numpy(arr.copy())
    return out, metadata


def restore(targets: Mapping[str, Tensor], tensors: Mapping[str, Tensor], strict: bool = True) -> None:
    """Copy ``tensors`` into ``targets`` in place, checking names and shapes."""
    for name, value in tensors.items():
        if name not in targets:
            if strict:
                raise KeyError(f"unknown tensor {name!r} in checkpoint")
            continue
        dst = targets[name]
        if tuple(dst.shape) != tuple(value.shape):
            raise ValueError(f"shape mismatch for tensor {name!r}: checkpoint {tuple(value.shape)}, "
                             f"model {tuple(dst.shape)}")
        with torch.no_grad():
            dst.copy_(value.to(dst.dtype))
    if strict:
        missing = set(targets) - set(tensors)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
