"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import InputError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] or a (3, H, W) uint8 array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InputError(f"PPM image must be (3, H, W), got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    _, h, w = arr.shape
    _write(path, b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def write_pgm(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise InputError(f"PGM map must be (H, W), got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise InputError("PGM values must be in [0, 255]")
    h, w = arr.shape
    _write(path, b"P5\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())


def _write(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _parse_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if buf[:2] != magic:
        raise InputError(f"{path}: expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates header and raster
    return width, height, pos + 1


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _check_size(buf: bytes, start: int, n: int, path) -> None:
    if len(buf) - start < n:
        raise InputError(f"{path}: raster truncated ({len(buf) - start} of {n} bytes)")


def read_ppm(path) -> np.ndarray:
    """-> (3, H, W) uint8."""
    buf = _read(path)
    w, h, start = _parse_header(buf, b"P6", path)
    _check_size(buf, start, w * h * 3, path)
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=start)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """-> (H, W) uint8."""
    buf = _read(path)
    w, h, start = _parse_header(buf, b"P5", path)
    _check_size(buf, start, w * h, path)
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start).reshape(h, w).copy()
