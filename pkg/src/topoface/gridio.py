"""Binary grid-tensor files (magic "TGRD").

Layout per record: 4-byte magic, u32 version (=1), u32 H, u32 W, u32 C,
then H*W*C little-endian float32 values, row-major, channel-interleaved.
NaN entries mark invalid pixels. A single-grid file is exactly
20 + 4*H*W*C bytes; the linear-model container concatenates two records.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class GridFormatError(ValueError):
    pass


def _write_record(fh, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 3:
        raise GridFormatError(f"grid must be (H, W, C), got shape {a.shape}")
    h, w, c = a.shape
    fh.write(_HEADER.pack(MAGIC, VERSION, h, w, c))
    fh.write(np.ascontiguousarray(a).tobytes())


def _read_record(buf: bytes, offset: int, path) -> tuple[np.ndarray, int]:
    if len(buf) - offset < _HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    magic, version, h, w, c = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    nbytes = 4 * h * w * c
    start = offset + _HEADER.size
    if len(buf) - start < nbytes:
        raise GridFormatError(f"{path}: payload truncated (need {nbytes} bytes)")
    a = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=start).reshape(h, w, c)
    return a.copy(), start + nbytes


def write_grid(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        _write_record(fh, array)


def write_grids(path: str | Path, arrays) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            _write_record(fh, a)


def read_grids(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    grids, offset = [], 0
    while offset < len(buf):
        a, offset = _read_record(buf, offset, path)
        grids.append(a)
    if not grids:
        raise GridFormatError(f"{path}: empty file")
    return grids

def read_grid(path: str | Path) -> np.ndarray:
    grids = read_grids(path)
    if len(grids) != 1:
        raise GridFormatError(f"{path}: expected a single grid, found {len(grids)}")
    return grids[0]
