"""Versioned binary container for geometry caches, datasets and checkpoints.

Layout (all integers little-endian)::

    magic       8 bytes  b"GEVNETC\\x00"
    version     u32
    meta_len    u32, followed by meta_len bytes of UTF-8 JSON
    n_sections  u32
    per section:
        name_len u16, name (UTF-8)
        dtype    1 byte: b"d" float64, b"f" float32, b"q" int64, b"B" uint8
        ndim     u8
        shape    ndim x u64
        payload  little-endian array bytes, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"GEVNETC\x00"
VERSION = 1

_DTYPES = {
    b"d": np.dtype("<f8"),
    b"f": np.dtype("<f4"),
    b"q": np.dtype("<i8"),
    b"B": np.dtype("u1"),
}
_CODES = {v.str if v.str[0] in "<|" else v.newbyteorder("<").str: k for k, v in _DTYPES.items()}


def _code_for(arr: np.ndarray) -> tuple[bytes, np.ndarray]:
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    kind = arr.dtype.kind
    if kind == "f":
        target = np.dtype("<f4") if arr.dtype.itemsize == 4 else np.dtype("<f8")
    elif kind in "iu" and arr.dtype.itemsize == 1 and kind == "u":
        target = np.dtype("u1")
    elif kind in "iu":
        target = np.dtype("<i8")
    else:
        raise FormatError(f"cannot store arrays of dtype {arr.dtype}")
    return _CODES[target.str], np.ascontiguousarray(arr, dtype=target)


def write_container(path: str | Path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` plus JSON-serialisable ``meta`` to ``path``."""
    meta_bytes = json.dumps(dict(meta), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            code, data = _code_for(np.asarray(arr))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(code)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes(order="C"))


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a container written by :func:`write_container`."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    (n_sections,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code = bytes(take(1))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code!r} in section {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last section")
    return meta, arrays
