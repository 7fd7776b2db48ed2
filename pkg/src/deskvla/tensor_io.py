"""Binary tensor files and parameter checkpoints.

File layout (little-endian throughout):

    bytes 0..3   magic b"TSR1"
    byte  4      dtype code: 1 = float64, 2 = float32
    byte  5      rank (1..3)
    bytes 6..7   reserved (zero)
    next 4*rank  uint32 dims
    payload      row-major values

A checkpoint is a directory of one tensor file per parameter plus a
``manifest.json`` mapping each name to its shape and relative file path.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"TSR1"
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}


class TensorFileError(ValueError):
    """Malformed tensor file or checkpoint."""


def write_tensor(path, array):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    if not 1 <= arr.ndim <= 3:
        raise TensorFileError(f"rank {arr.ndim} not supported by the tensor format")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBH", _CODES[arr.dtype], arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise TensorFileError(f"{path}: bad magic {magic!r}")
        code, rank, _ = struct.unpack("<BBH", fh.read(4))
        if code not in _DTYPES:
            raise TensorFileError(f"{path}: unknown dtype code {code}")
        if not 1 <= rank <= 3:
            raise TensorFileError(f"{path}: bad rank {rank}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims))
        payload = fh.read(count * _DTYPES[code].itemsize)
        if len(payload) != count * _DTYPES[code].itemsize:
            raise TensorFileError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims)
    return np.ascontiguousarray(arr.astype(np.float64))


def save_checkpoint(directory, raw, ema=None, meta=None):
    """Write named arrays (and an optional EMA set) plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": MAGIC.decode(), "params": {}, "ema": {}, "meta": meta or {}}

    def _write_group(group, arrays, subdir):
        os.makedirs(os.path.join(directory, subdir), exist_ok=True)
        for name, arr in arrays.items():
            rel = os.path.join(subdir, f"{name}.tsr")
            write_tensor(os.path.join(directory, rel), arr)
            manifest[group][name] = {"shape": list(np.shape(arr)), "file": rel}

    _write_group("params", raw, "raw")
    if ema:
        _write_group("ema", ema, "ema")
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return os.path.join(directory, "manifest.json")


def load_checkpoint(directory):
    """Returns (raw dict, ema dict, meta dict); shapes validated."""
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    def _read_group(group):
        out = {}
        for name, entry in manifest.get(group, {}).items():
            arr = read_tensor(os.path.join(directory, entry["file"]))
            if list(arr.shape) != entry["shape"]:
                raise TensorFileError(f"{name}: shape {arr.shape} != manifest {entry['shape']}")
            out[name] = arr
        return out

    return _read_group("params"), _read_group("ema"), manifest.get("meta", {})
