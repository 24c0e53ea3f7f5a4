"""Binary field container ``FLD1``.

Layout (little-endian): magic ``FLD1``, ``rank`` u32, ``dims`` u32 x rank,
``dtype`` u32 (0 = f32, 1 = f64), ``grid_tag`` u32 (0 = lat/lon, 1 = HEALPix,
2 = padded HEALPix), ``meta_len`` u32, ``meta_len`` bytes of UTF-8 JSON, then
the row-major payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GRID_TAGS",
    "FieldFile",
    "FieldFormatError",
    "read_field",
    "write_field",
]

_MAGIC = b"FLD1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
GRID_TAGS = {"latlon": 0, "healpix": 1, "healpix_padded": 2}
_TAG_NAMES = {v: k for k, v in GRID_TAGS.items()}


class FieldFormatError(ValueError):
    """Malformed, truncated or non-finite field file."""


@dataclass(frozen=True, eq=False)
class FieldFile:
    data: np.ndarray
    grid_tag: str
    meta: dict = field(default_factory=dict)


def write_field(path, data, grid_tag: str, meta: dict | None = None, *, dtype: str = "f64") -> None:
    """Write ``data`` with its grid tag and JSON metadata.

    Raises:
        FieldFormatError: if the data contain NaN or infinity.
    """
    if grid_tag not in GRID_TAGS:
        raise ValueError(f"unknown grid tag {grid_tag!r}; expected one of {sorted(GRID_TAGS)}")
    code = {"f32": 0, "f64": 1}.get(dtype)
    if code is None:
        raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FieldFormatError("refusing to write a field with non-finite values")
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<III", code, GRID_TAGS[grid_tag], len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_field(path) -> FieldFile:
    """Read a field file; the payload is returned as float64.

    Raises:
        FieldFormatError: bad magic, inconsistent sizes, unknown codes or NaN.
    """
    data = Path(path).read_bytes()

    def unpack(fmt, pos):
        try:
            return struct.unpack_from(fmt, data, pos)
        except struct.error as exc:
            raise FieldFormatError(f"{path}: truncated header") from exc

    if data[:4] != _MAGIC:
        raise FieldFormatError(f"{path}: not a field file")
    (rank,) = unpack("<I", 4)
    dims = unpack(f"<{rank}I", 8)
    pos = 8 + 4 * rank
    code, tag, meta_len = unpack("<III", pos)
    pos += 12
    if code not in _DTYPES:
        raise FieldFormatError(f"{path}: unknown dtype code {code}")
    if tag not in _TAG_NAMES:
        raise FieldFormatError(f"{path}: unknown grid tag {tag}")
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: bad metadata") from exc
    pos += meta_len
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - pos != count * dt.itemsize:
        raise FieldFormatError(
            f"{path}: payload has {len(data) - pos} bytes, expected {count * dt.itemsize}"
        )
    arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FieldFormatError(f"{path}: payload contains NaN or infinity")
    return FieldFile(arr, _TAG_NAMES[tag], meta)
