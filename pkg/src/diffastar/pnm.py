"""Netpbm image I/O (binary P5 grayscale, P6 RGB) with atomic writes.

Occupancy maps are stored as P5 with maxval 255: 255 = passable,
0 = obstacle. RGB renderings are stored as P6 with channel values
``round(v * 255)`` for ``v`` in [0, 1]. Every write stages the bytes in
a temp file next to the destination and renames it into place, so an
interrupted run never leaves a torn file behind.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ShapeMismatch
from .grid import GridMap


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _header_tokens(buf: bytes, start: int, count: int) -> tuple[list[int], int]:
    """Parse ``count`` numeric header tokens from ``buf[start:]``.

    Skips whitespace and ``#`` comments. Returns the tokens and the
    offset of the first raster byte (one whitespace byte terminates the
    header per the format).
    """
    tokens: list[int] = []
    i, n = start, len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        if j == i or j == n:
            raise ValueError("truncated netpbm header")
        try:
            tokens.append(int(buf[i:j]))
        except ValueError as e:
            raise ValueError(f"bad netpbm header token {buf[i:j]!r}") from e
        i = j
    return tokens, i + 1


def _parse(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise ValueError(f"expected {magic.decode()} file, got {buf[:2]!r}")
    (w, h, maxval), off = _header_tokens(buf, 2, 3)
    if w <= 0 or h <= 0:
        raise ValueError(f"bad netpbm dimensions {w}x{h}")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}, expected 255")
    need = w * h * channels
    if len(buf) - off != need:
        raise ValueError(f"raster has {len(buf) - off} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return arr.reshape(shape).copy()


def write_pgm(path: str, gray: np.ndarray) -> None:
    arr = np.asarray(gray, dtype=np.uint8)
    if arr.ndim != 2:
        raise ShapeMismatch(f"PGM wants a 2D array, got {arr.shape}")
    h, w = arr.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes(order="C"))


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return _parse(fh.read(), b"P5", 1)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"PPM wants an (H, W, 3) array, got {arr.shape}")
    h, w = arr.shape[:2]
    atomic_write_bytes(path, b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes(order="C"))


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return _parse(fh.read(), b"P6", 3)


def save_map(path: str, grid: GridMap) -> None:
    """Occupancy grids go to PGM (255=passable), images to PPM."""
    if grid.kind == "binary":
        write_pgm(path, grid.binary * np.uint8(255))
    else:
        write_ppm(path, np.round(grid.image * 255.0).astype(np.uint8))


def load_map(path: str) -> GridMap:
    """Read a map file back; the extension/magic decides the kind."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P5":
        gray = _parse(buf, b"P5", 1)
        return GridMap(binary=(gray >= 128).astype(np.uint8))
    if buf[:2] == b"P6":
        rgb = _parse(buf, b"P6", 3)
        return GridMap(image=rgb.astype(np.float64) / 255.0)
    raise ValueError(f"{path}: not a P5/P6 netpbm file")
