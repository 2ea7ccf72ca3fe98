"""Binary PPM/PGM image files and the float-plane debug dump."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise ValueError(f"expected {magic!r} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary P6."""
    rgb = np.ascontiguousarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM payload must be uint8 [H, W, 3]")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an H x W uint8 array as binary P5."""
    gray = np.ascontiguousarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError("PGM payload must be uint8 [H, W]")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P5")
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary {0,1} mask -> PGM with 0/255."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    gray = read_pgm(path)
    if not np.isin(gray, (0, 255)).all():
        raise ValueError(f"{path}: mask values must be 0 or 255")
    return (gray > 0).astype(np.uint8)


def write_planes(path: str | Path, planes: np.ndarray) -> None:
    """Dump a stack of float planes.

    Header is three little-endian int32 (n_planes, rows, cols), followed by
    row-major little-endian float32 values.
    """
    planes = np.asarray(planes, dtype="<f4")
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise ValueError("planes must be [N, R, C] or [R, C]")
    n, r, c = planes.shape
    Path(path).write_bytes(struct.pack("<3i", n, r, c) + planes.tobytes())


def read_planes(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    n, r, c = struct.unpack_from("<3i", data)
    expected = 12 + 4 * n * r * c
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, r, c).astype(np.float32)
