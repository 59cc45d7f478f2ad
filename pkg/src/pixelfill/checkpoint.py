"""Binary checkpoint format for model and optimizer state.

Layout, all integers little-endian:

    8 bytes   magic  b"PXFILL\\x00\\x01"
    u32       format version (currently 1)
    u32       config JSON length, then that many UTF-8 bytes
    u64       global step
    u32       tensor count
    per tensor:
        u16   name length, then that many UTF-8 bytes
        u8    dtype code (0 = float32, 1 = float64, 2 = int64)
        u8    ndim
        u32*  dims
        raw   little-endian tensor data

Saves are atomic (write to a temp file, then rename): a crash mid-save
never leaves a truncated checkpoint under the target name. Loads report
the byte offset of any structural problem.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PXFILL\x00\x01"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, config: dict, step: int, tensors: dict) -> None:
    """Serialize ``tensors`` (name -> ndarray) with config metadata."""
    path = Path(path)
    if step < 0:
        raise ValueError("step must be >= 0")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<Q", step)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> tuple[dict, int, dict]:
    """Read a checkpoint; returns (config, step, tensors)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def fail(msg):
        raise DataError(f"{path}: {msg} (byte offset {pos})")

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            fail(f"truncated while reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        pos = 0
        fail("bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "format version"))
    if version != FORMAT_VERSION:
        fail(f"unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg_bytes = take(cfg_len, "config JSON")
    try:
        config = json.loads(cfg_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        fail(f"invalid config JSON: {exc}")
    (step,) = struct.unpack("<Q", take(8, "step"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"tensor {name!r} dtype/ndim"))
        if code not in _CODE_DTYPES:
            fail(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor {name!r} dims"))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = take(nbytes, f"tensor {name!r} data")
        arr = np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype)
        if name in tensors:
            fail(f"duplicate tensor name {name!r}")
        tensors[name] = arr.reshape(dims)
    if pos != len(raw):
        fail(f"{len(raw) - pos} trailing bytes after last tensor")
    return config, int(step), tensors
