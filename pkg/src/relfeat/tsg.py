"""TSG1 binary container.

Single-array layout (little endian)::

    b"TSG1" | kind:u8 | dtype:u8 | 0:u16 | ndim:u32 | ndim * u32 extents | payload

Named bundles use kind ``BUNDLE`` and a u32 entry count in place of ndim; each
entry is ``name_len:u16 | utf-8 name | dtype:u8 | 0:u8*3 | ndim:u32 | extents |
payload``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSG1"

KIND_FEATURE = 0
KIND_GROUPING = 1
KIND_EDGE = 2
KIND_BUNDLE = 3

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    """Base class for container decoding problems."""


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    try:
        return DTYPE_CODES[arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def _encode_array(arr: np.ndarray) -> tuple[int, bytes]:
    code = _dtype_code(arr)
    arr = np.ascontiguousarray(arr, dtype=DTYPES[code])
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return code, head + arr.tobytes()


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf = buf
        self.pos = 0
        self.where = where

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"{self.where}: truncated while reading {what} "
                                   f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, code: int, what: str) -> np.ndarray:
        if code not in DTYPES:
            raise FormatError(f"{self.where}: unknown dtype code {code} for {what}")
        (ndim,) = struct.unpack("<I", self.take(4, f"{what} ndim"))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"{what} extents"))
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = self.take(n * dt.itemsize, f"{what} payload")
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def encode(arr: np.ndarray, kind: int) -> bytes:
    code, body = _encode_array(np.asarray(arr))
    return MAGIC + struct.pack("<BBH", kind, code, 0) + body


def decode(buf: bytes, where: str = "<buffer>") -> tuple[int, np.ndarray]:
    r = _Reader(buf, where)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
    kind, code, _ = struct.unpack("<BBH", r.take(4, "header"))
    if kind == KIND_BUNDLE:
        raise FormatError(f"{where}: file is a named bundle, not a single array")
    arr = r.array(code, "array")
    if r.pos != len(buf):
        raise DimensionMismatch(f"{where}: {len(buf) - r.pos} trailing bytes after payload; extents disagree with size")
    return kind, arr


def encode_bundle(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BBH", KIND_BUNDLE, 0, 0), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        code, body = _encode_array(np.asarray(arr))
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B3x", code), body]
    return b"".join(parts)


def decode_bundle(buf: bytes, where: str = "<buffer>") -> dict[str, np.ndarray]:
    r = _Reader(buf, where)
    if r.take(4, "magic") != MAGIC:
        raise BadMagic(f"{where}: bad magic, expected {MAGIC!r}")
    kind, _, _ = struct.unpack("<BBH", r.take(4, "header"))
    if kind != KIND_BUNDLE:
        raise FormatError(f"{where}: kind {kind} is not a named bundle")
    (count,) = struct.unpack("<I", r.take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"entry {i} name length"))
        name = r.take(nlen, f"entry {i} name").decode("utf-8")
        (code,) = struct.unpack("<B3x", r.take(4, f"entry {name!r} dtype"))
        out[name] = r.array(code, f"entry {name!r}")
    if r.pos != len(buf):
        raise DimensionMismatch(f"{where}: {len(buf) - r.pos} trailing bytes after last entry")
    return out


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_bundle(path, arrays: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_bundle(arrays))


def load_bundle(path) -> dict[str, np.ndarray]:
    return decode_bundle(Path(path).read_bytes(), str(path))
