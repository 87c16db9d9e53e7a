"""Versioned binary container used for datasets and body models.

Layout (all integers little-endian)::

    magic        4 bytes   e.g. b"ASDS" (dataset), b"ABDY" (body model)
    version      uint32
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (sorted keys, compact)
    n_arrays     uint32
    n_arrays times:
        name_len uint32, name UTF-8
        dtype    uint8   (index into _DTYPES)
        ndim     uint8
        shape    ndim x uint32
        data     prod(shape) * itemsize bytes, little-endian, C order

Writing the same metadata and arrays always produces the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import DatasetError, TruncatedFile, VersionMismatch

_DTYPES = ["<f8", "<f4", "<i8", "<i4", "|u1", "|b1"]


def to_bytes(magic: bytes, version: int, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [magic, struct.pack("<II", version, len(meta_raw)), meta_raw, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        arr = np.ascontiguousarray(array)
        code = _dtype_code(arr.dtype)
        arr = arr.astype(_DTYPES[code], copy=False)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def from_bytes(data: bytes, magic: bytes, version: int, kind: str = "dataset") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    reader = _Reader(data)
    found_magic = reader.take(4)
    if found_magic != magic:
        raise DatasetError(f"not a {kind} file (magic {found_magic!r}, expected {magic!r})")
    found_version, meta_len = reader.unpack("<II")
    if found_version != version:
        raise VersionMismatch(kind, found_version, version)
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt {kind} metadata: {exc}") from exc
    (count,) = reader.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code >= len(_DTYPES):
            raise DatasetError(f"unknown dtype code {code} for array {name!r}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.remaining():
        raise DatasetError(f"{reader.remaining()} trailing byte(s) after {kind} payload")
    return meta, arrays


def write_container(path: Union[str, Path], magic: bytes, version: int, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]):
    Path(path).write_bytes(to_bytes(magic, version, meta, arrays))


def read_container(path: Union[str, Path], magic: bytes, version: int, kind: str = "dataset"):
    return from_bytes(Path(path).read_bytes(), magic, version, kind)


def _dtype_code(dtype: np.dtype) -> int:
    if dtype == np.bool_:
        return 5
    if dtype.kind == "f":
        return 0 if dtype.itemsize == 8 else 1
    if dtype == np.uint8:
        return 4
    if dtype.kind in "iu":
        return 2 if dtype.itemsize == 8 else 3
    raise ValueError(f"unsupported dtype {dtype}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedFile(f"file truncated at byte {len(self.data)} (needed {end})")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.pos
