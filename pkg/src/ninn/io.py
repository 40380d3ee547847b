"""Grid dumps and heatmap rendering.

NNG1 layout: ``b"NNG1"``, u32 rows, u32 cols, then ``rows*cols`` little-endian
float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NNG1"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Malformed grid dump."""


def write_grid(path, grid: np.ndarray) -> None:
    a = np.asarray(grid, dtype="<f8")
    if a.ndim != 2:
        raise ValueError(f"grid dump needs a 2-d array, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file is {len(raw)} bytes, header needs {_HEADER.size} (byte offset {len(raw)})")
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    need = _HEADER.size + 8 * rows * cols
    if len(raw) != need:
        where = min(len(raw), need)
        raise FormatError(
            f"{path}: {rows}x{cols} grid needs {need} bytes, file has {len(raw)} (byte offset {where})"
        )
    return np.frombuffer(raw, "<f8", rows * cols, _HEADER.size).reshape(rows, cols).astype(np.float64)


def write_grid_csv(path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), fmt="%.17g", delimiter=",")


def dump_grid(stem, grid: np.ndarray) -> tuple:
    """Write ``<stem>.nng`` and ``<stem>.csv``; returns both paths."""
    stem = Path(stem)
    nng, csv = stem.parent / f"{stem.name}.nng", stem.parent / f"{stem.name}.csv"
    write_grid(nng, grid)
    write_grid_csv(csv, grid)
    return nng, csv


def _colormap(t: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return (colormaps["viridis"](t)[..., :3] * 255).round().astype(np.uint8)


def render_heatmap(dump_path, image_path) -> Path:
    """Render an NNG1 dump as a false-colour PNG, one pixel per node.

    Row 0 of the grid is the top image row. The value range is written to
    ``<image>.txt`` as ``min=<v>`` and ``max=<v>`` lines.
    """
    from PIL import Image

    grid = read_grid(dump_path)
    lo, hi = float(np.min(grid)), float(np.max(grid))
    span = hi - lo
    t = (grid - lo) / span if span > 0 else np.zeros_like(grid)
    image_path = Path(image_path)
    Image.fromarray(_colormap(t)).save(image_path)
    sidecar = image_path.with_suffix(image_path.suffix + ".txt")
    sidecar.write_text(f"min={lo:.17g}\nmax={hi:.17g}\n")
    return sidecar


def read_sidecar(path) -> tuple:
    vals = dict(line.split("=", 1) for line in Path(path).read_text().split())
    return float(vals["min"]), float(vals["max"])
