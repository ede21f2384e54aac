"""On-disk formats: ``mfacbin`` matrices, CSV gradients and tagged containers.

A plain ``mfacbin`` file is a 24-byte header followed by ``m * d`` values::

    0-3   b"MFAC"
    4     version (1)
    5     dtype code (0 = f32, 1 = f64)
    6-7   reserved, zero
    8-15  m, uint64 little-endian
    16-23 d, uint64 little-endian

A container uses the same first six bytes, sets byte 6 to ``1`` and stores the
section count at bytes 8-15. Each section then carries a 32-byte header
(8-byte NUL-padded ASCII tag, dtype code, 7 zero bytes, rows, cols) and its
row-major data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .core import GradientMatrix, FormatError, DTYPES

MAGIC = b"MFAC"
VERSION = 1
CONTAINER_FLAG = 1
CSV_LIMIT = 10**6

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBBBQQ")
_SECTION = struct.Struct("<8sB7xQQ")


def _code_for(dtype) -> int:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return 0
    if dtype == np.float64:
        return 1
    raise FormatError(f"unsupported dtype {dtype}")


def _target_dtype(dtype):
    if dtype is None:
        return None
    return DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype)


def encode_matrix(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[None, :]
    code = _code_for(arr.dtype)
    m, d = arr.shape
    header = _HEADER.pack(MAGIC, VERSION, code, 0, 0, m, d)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)")
    magic, version, code, flag, pad, m, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    if flag or pad:
        raise FormatError("reserved header bytes must be zero (container files need load_container)")
    dt = _CODES[code]
    expected = _HEADER.size + m * d * dt.itemsize
    if len(buf) != expected:
        raise FormatError(f"header says {m}x{d} ({expected} bytes) but file has {len(buf)} bytes")
    arr = np.frombuffer(buf, dtype=dt, count=m * d, offset=_HEADER.size)
    return arr.reshape(m, d).astype(dt.newbyteorder("="))


def save_gradients(path, G, fmt: str | None = None):
    rows = G.rows if isinstance(G, GradientMatrix) else np.asarray(G)
    fmt = fmt or _guess_format(path)
    if fmt == "csv":
        np.savetxt(path, np.atleast_2d(rows), delimiter=",", fmt="%.17g", newline="\n")
    elif fmt == "mfacbin":
        with open(path, "wb") as fh:
            fh.write(encode_matrix(rows))
    else:
        raise FormatError(f"unknown format {fmt!r}")


def load_gradients(path, fmt: str | None = None, dtype=None) -> GradientMatrix:
    """Read a gradient matrix from ``mfacbin`` or CSV.

    ``dtype`` ("f32"/"f64" or a numpy dtype) converts after parsing; f32 to
    f64 widening is exact. Non-finite values are rejected with their location.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fmt = fmt or _guess_format(path)
    if fmt == "mfacbin":
        with open(path, "rb") as fh:
            rows = decode_matrix(fh.read())
    elif fmt == "csv":
        rows = _read_csv(path)
    else:
        raise FormatError(f"unknown format {fmt!r}")
    target = _target_dtype(dtype)
    if target is not None:
        rows = rows.astype(target)
    return GradientMatrix(rows)


def _read_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"line {lineno}: expected {width} columns, got {len(row)}")
            rows.append(row)
            if len(rows) * width > CSV_LIMIT:
                raise FormatError(f"CSV input limited to {CSV_LIMIT} values; use mfacbin")
    if not rows:
        raise FormatError("empty CSV file")
    return np.array(rows, dtype=np.float64)


def _guess_format(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "mfacbin"


def encode_container(sections: dict) -> bytes:
    """Serialize ``{tag: array}``; 1-D arrays are stored as one row."""
    parts = [_HEADER.pack(MAGIC, VERSION, 1, CONTAINER_FLAG, 0, len(sections), 0)]
    for tag, arr in sections.items():
        raw = tag.encode("ascii")
        if len(raw) > 8:
            raise FormatError(f"section tag {tag!r} longer than 8 bytes")
        arr = np.asarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr[None, :]
        code = _code_for(arr.dtype)
        parts.append(_SECTION.pack(raw, code, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for header")
    magic, version, _, flag, _, count, _ = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION or flag != CONTAINER_FLAG:
        raise FormatError("not an mfacbin container")
    out = {}
    pos = _HEADER.size
    for _ in range(count):
        if pos + _SECTION.size > len(buf):
            raise FormatError("truncated section header")
        raw, code, rows, cols = _SECTION.unpack_from(buf, pos)
        pos += _SECTION.size
        if code not in _CODES:
            raise FormatError(f"unknown dtype code {code}")
        dt = _CODES[code]
        nbytes = rows * cols * dt.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated section {raw!r}")
        arr = np.frombuffer(buf, dtype=dt, count=rows * cols, offset=pos).reshape(rows, cols)
        out[raw.rstrip(b"\0").decode("ascii")] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last section")
    return out


def save_container(path, sections: dict):
    with open(path, "wb") as fh:
        fh.write(encode_container(sections))


def load_container(path) -> dict:
    with open(path, "rb") as fh:
        return decode_container(fh.read())
