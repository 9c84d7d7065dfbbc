"""MSGT binary tensor files and named-tensor checkpoint directories.

Layout: magic ``MSGT``, u32 version=1, u32 rank, rank x u64 dims,
u8 dtype (0=f32, 1=f64), then the payload little-endian row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSGT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class MsgtError(IOError):
    pass


def write_msgt(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODE_FOR:
        raise MsgtError(f"unsupported dtype {arr.dtype}; MSGT stores f32/f64")
    code = _CODE_FOR[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<B", code))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_msgt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise MsgtError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise MsgtError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        (code,) = struct.unpack("<B", fh.read(1))
        if code not in _DTYPE_CODES:
            raise MsgtError(f"{path}: unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise MsgtError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensor_dir(directory, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor checkpoint: manifest.json mapping name -> file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (name, arr) in enumerate(tensors.items()):
        fname = f"t{i:04d}.msgt"
        write_msgt(directory / fname, np.asarray(arr))
        manifest[name] = fname
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_tensor_dir(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    return {name: read_msgt(directory / fname) for name, fname in manifest.items()}
