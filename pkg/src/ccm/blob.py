"""Deterministic binary container: JSON header followed by raw arrays.

Layout::

    b"CCMBLOB1"  |  uint64 LE header length  |  UTF-8 JSON header  |  array bytes...

The header carries an ``"arrays"`` table (name, dtype, shape) in storage
order. Arrays are written little-endian, C order. Equal inputs give
byte-identical files, which ``np.savez`` does not guarantee (zip timestamps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CCMBLOB1"
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.floating):
        return "f8"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        return "i8"
    raise FormatError(f"unsupported dtype {a.dtype}")


def write_blob(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    payload = []
    for name, a in arrays.items():
        a = np.asarray(a)
        code = _code(a)
        table.append({"name": name, "dtype": code, "shape": list(a.shape)})
        payload.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    full = dict(header)
    full["arrays"] = table
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for chunk in payload:
            fh.write(chunk)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a ccm file")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    try:
        header = json.loads(raw[off : off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted header ({exc})") from None
    off += n
    arrays = {}
    for entry in header.pop("arrays", []):
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[off : off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays
