"""STF: a minimal, byte-stable tensor file.

Layout::

    b"STNSR1\\n"                 7-byte magic
    u64 little-endian          header length in bytes
    header                     UTF-8 JSON: {"dtype": ..., "order": "row-major", "shape": [...]}
    zero padding               up to the next multiple of 64 bytes
    payload                    little-endian values, row-major

The header is serialized with sorted keys and no whitespace, so equal
arrays always produce identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, ValidationError
from .tensor import Tensor

MAGIC = b"STNSR1\n"
ALIGN = 64
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u16": np.dtype("<u2")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.uint16): "u16"}

PathLike = Union[str, os.PathLike]


def _dtype_name(arr: np.ndarray) -> str:
    native = arr.dtype.newbyteorder("=")
    if native in _NAMES:
        return _NAMES[native]
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise ValidationError("integer values outside [0, 65535] cannot be stored as u16")
        return "u16"
    raise ValidationError(f"no STF dtype for {arr.dtype}; use float32, float64 or uint16")


def encode(data) -> bytes:
    arr = np.asarray(data.data if isinstance(data, Tensor) else data)
    name = _dtype_name(arr)
    header = json.dumps({"dtype": name, "order": "row-major", "shape": list(arr.shape)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(header)) + header
    pad = -len(head) % ALIGN
    payload = np.ascontiguousarray(arr, dtype=DTYPES[name]).tobytes(order="C")
    return head + b"\0" * pad + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {bytes(buf[:len(MAGIC)])!r}")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise FormatError("header-length", "file ends before the 8-byte header length")
    (hlen,) = struct.unpack("<Q", buf[pos:pos + 8])
    pos += 8
    if len(buf) < pos + hlen:
        raise FormatError("header", f"declares {hlen} header bytes but only {len(buf) - pos} remain")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"not UTF-8 JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError("header", "JSON header must be an object")
    name = header.get("dtype")
    if name not in DTYPES:
        raise FormatError("dtype", f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}")
    if header.get("order") != "row-major":
        raise FormatError("order", f"unsupported order {header.get('order')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                              for s in shape):
        raise FormatError("shape", f"shape must be a list of non-negative integers, got {shape!r}")
    start = pos + hlen
    start += -start % ALIGN
    dt = DTYPES[name]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    have = len(buf) - start
    if have < need:
        raise FormatError("payload", f"truncated: expected {need} bytes, found {max(have, 0)}")
    if have > need:
        raise FormatError("payload", f"{have - need} unexpected trailing bytes")
    arr = np.frombuffer(buf, dtype=dt, count=need // dt.itemsize, offset=start).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_stf(path: PathLike, data) -> None:
    """Write a tensor or array (float32, float64, or integer labels as u16)."""
    Path(path).write_bytes(encode(data))


def read_stf(path: PathLike) -> np.ndarray:
    """Read an STF file into a native-endian array (float32, float64 or uint16)."""
    return decode(Path(path).read_bytes())


def read_tensor(path: PathLike) -> Tensor:
    arr = read_stf(path)
    if arr.dtype == np.uint16:
        raise FormatError("dtype", "u16 files hold label masks; use read_stf")
    return Tensor(arr)
