"""Single-file checkpoint container used repo-wide.

Layout: a magic string, an 8-byte little-endian manifest length, the JSON
manifest, then all tensor buffers back to back. Buffers are raw
little-endian IEEE-754, row-major; the manifest records (name, dtype,
shape, byte offset) per tensor plus a free-form `meta` dict for small
scalar state (step counters, rng stream states, config echo).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QFCKPT1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write named arrays (numpy or Tensor-like with .data) plus metadata."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"checkpoint: unsupported dtype {arr.dtype} for '{name}'")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {"tensors": entries, "data_bytes": offset, "meta": meta or {}}
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (arrays, meta); truncation or corruption raises CheckpointError."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise CheckpointError(f"checkpoint {path}: bad magic, not a checkpoint file")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(mlen)
        if len(payload) != mlen:
            raise CheckpointError(f"checkpoint {path}: truncated manifest")
        manifest = json.loads(payload.decode("utf-8"))
        blob = fh.read()
    if len(blob) != manifest["data_bytes"]:
        raise CheckpointError(
            f"checkpoint {path}: truncated data section "
            f"({len(blob)} bytes, manifest says {manifest['data_bytes']})"
        )
    arrays = {}
    for ent in manifest["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPES[ent["dtype"]])
        arr = arr.reshape(ent["shape"]).astype(ent["dtype"])
        if arr.nbytes != n:
            raise CheckpointError(f"checkpoint {path}: entry '{ent['name']}' size mismatch")
        arrays[ent["name"]] = arr
    return arrays, manifest["meta"]


def load_into(params: dict, arrays: dict, prefix: str = "", strict_shapes: bool = True):
    """Copy checkpoint arrays into an existing parameter dict in place.

    Only names present in `params` and starting with `prefix` are loaded;
    a shape mismatch names the offending entry.
    """
    loaded = []
    for name, arr in arrays.items():
        if prefix and not name.startswith(prefix):
            continue
        if name not in params:
            continue
        tgt = params[name]
        if strict_shapes and tuple(tgt.data.shape) != tuple(arr.shape):
            raise CheckpointError(
                f"checkpoint entry '{name}': shape {tuple(arr.shape)} does not match "
                f"parameter shape {tuple(tgt.data.shape)}"
            )
        tgt.data = arr.astype(tgt.data.dtype, copy=True)
        loaded.append(name)
    return loaded
