"""Versioned container for named float arrays plus a JSON metadata block.

Layout (all integers little-endian)::

    b"MODALCKP" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header lists every array as {name, shape, dtype, offset, nbytes}; offsets
are relative to the start of the payload. Keys are sorted and arrays are
written in name order, so equal contents give byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"MODALCKP"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.ascontiguousarray(x)


def dumps(arrays: Mapping[str, Any], meta: Mapping[str, Any]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = _to_numpy(arrays[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for array {name!r}")
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint container (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return arrays, header["meta"]


def save(path, arrays: Mapping[str, Any], meta: Mapping[str, Any]) -> str:
    """Write a container and return its sha256 hex digest."""
    blob = dumps(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """Hash of names, shapes and raw bytes; used for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def config_hash(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
