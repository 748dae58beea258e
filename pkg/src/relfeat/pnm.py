"""Binary PGM (P5) and PPM (P6) images, 8-bit."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _to_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    """``img`` is HxW, either uint8 or floats in [0, 1]."""
    a = _to_u8(np.asarray(img))
    if a.ndim != 2:
        raise ImageFormatError(f"PGM needs a 2-d image, got {a.shape}")
    Path(path).write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def write_ppm(path, img) -> None:
    a = _to_u8(np.asarray(img))
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageFormatError(f"PPM needs an HxWx3 image, got {a.shape}")
    Path(path).write_bytes(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read P5 or P6; returns float64 in [0, 1], HxW or HxWx3."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    try:
        (magic, w, h, maxval), pos = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ImageFormatError, ValueError) as exc:
        raise ImageFormatError(f"{path}: bad header ({exc})") from exc
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit P5/P6 supported")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    data = buf[pos:pos + n]
    if len(data) != n:
        raise ImageFormatError(f"{path}: truncated pixel data")
    a = np.frombuffer(data, dtype=np.uint8).astype(np.float64) / 255.0
    return a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)


def read_gray(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    return img
