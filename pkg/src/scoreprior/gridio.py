"""Raw grid files, 16-bit PGM previews and metrics CSV output.

Raw grid layout: ``b"SGRD"``, then little-endian u32 version, height and
width, then height*width little-endian float64 values in row-major order.
"""
from __future__ import annotations

import csv
import math
import struct

import numpy as np

GRID_MAGIC = b"SGRD"
GRID_VERSION = 1
_HDR = struct.Struct("<4sIII")

CSV_HEADER = ("run_id", "image_id", "metric", "value", "units")


class GridFormatError(ValueError):
    pass


class MalformedHeaderError(GridFormatError):
    pass


class VersionMismatchError(GridFormatError):
    pass


class PayloadLengthError(GridFormatError):
    pass


def grid_bytes(grid) -> bytes:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
        raise ValueError(f"refusing to save a {g.shape} grid")
    return _HDR.pack(GRID_MAGIC, GRID_VERSION, g.shape[0], g.shape[1]) + g.astype("<f8").tobytes()


def save_grid(path, grid) -> None:
    data = grid_bytes(grid)
    with open(path, "wb") as f:
        f.write(data)


def parse_grid(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HDR.size:
        raise MalformedHeaderError(f"{source}: {len(blob)} bytes is too short for a grid header")
    magic, version, h, w = _HDR.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise MalformedHeaderError(f"{source}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, expected {GRID_VERSION}")
    if h == 0 or w == 0:
        raise MalformedHeaderError(f"{source}: empty {h}x{w} grid")
    need = h * w * 8
    got = len(blob) - _HDR.size
    if got != need:
        raise PayloadLengthError(f"{source}: payload has {got} bytes, {h}x{w} grid needs {need}")
    return np.frombuffer(blob, dtype="<f8", offset=_HDR.size).reshape(h, w).astype(np.float64)


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_grid(f.read(), str(path))


def pgm_levels(grid, peak: float = 1.0) -> np.ndarray:
    """Map [0, peak] linearly onto 0..65535, clipping, rounding half up."""
    g = np.asarray(grid, dtype=np.float64)
    scaled = np.clip(g / peak, 0.0, 1.0) * 65535.0
    return np.floor(scaled + 0.5).astype(np.uint16)


def export_pgm(grid, path, peak: float = 1.0) -> None:
    levels = pgm_levels(grid, peak)
    h, w = levels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(levels.astype(">u2").tobytes())


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def write_metrics_csv(records, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow((r.run_id, r.image_id, r.name, format_value(r.value), r.units))
