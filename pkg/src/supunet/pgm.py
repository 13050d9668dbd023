"""Binary PGM (P5) reading and writing.

Samples wider than 8 bits (maxval > 255) are big-endian 16-bit words, per
the Netpbm format.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class PGMImage(NamedTuple):
    pixels: np.ndarray
    maxval: int
    raster_offset: int


class DecodeError(ValueError):
    """Malformed PGM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(pixels: np.ndarray, maxval: int) -> bytes:
    """Encode a (height, width) array of integers in ``[0, maxval]``."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM stores 2-D images, got shape {pixels.shape}")
    if not 1 <= maxval <= 65535:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    h, w = pixels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + pixels.astype(dtype).tobytes()


def _token(data: bytes, pos: int):
    """Next header token and the position just past it, skipping comments."""
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    if pos >= len(data):
        raise DecodeError("unexpected end of header", pos)
    start = pos
    while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], start, pos


def _header_int(data: bytes, pos: int, what: str):
    tok, start, pos = _token(data, pos)
    if not tok.isdigit():
        raise DecodeError(f"expected {what}, found {tok[:16]!r}", start)
    value = int(tok)
    if value < 1:
        raise DecodeError(f"{what} must be positive, got {value}", start)
    return value, start, pos


def decode(data: bytes) -> PGMImage:
    """Parse P5 bytes; ``pixels`` comes back as an int64 (h, w) array."""
    if data[:2] != b"P5":
        raise DecodeError(f"bad magic {data[:2]!r}, expected b'P5'", 0)
    pos = 2
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise DecodeError("expected whitespace after magic", pos)
    width, _, pos = _header_int(data, pos, "width")
    height, _, pos = _header_int(data, pos, "height")
    maxval, start, pos = _header_int(data, pos, "maxval")
    if maxval > 65535:
        raise DecodeError(f"maxval {maxval} exceeds 65535", start)
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise DecodeError("expected a single whitespace byte before the raster", pos)
    pos += 1
    bytes_per = 2 if maxval > 255 else 1
    need = width * height * bytes_per
    have = len(data) - pos
    if have < need:
        raise DecodeError(f"truncated raster: need {need} bytes, found {have}", len(data))
    dtype = ">u2" if bytes_per == 2 else "u1"
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).astype(np.int64)
    bad = np.flatnonzero(pixels > maxval)
    if bad.size:
        raise DecodeError(f"sample {pixels[bad[0]]} exceeds maxval {maxval}", pos + int(bad[0]) * bytes_per)
    return PGMImage(pixels.reshape(height, width), maxval, pos)


def write(path: os.PathLike, pixels: np.ndarray, maxval: int) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(pixels, maxval))


def read(path: os.PathLike) -> PGMImage:
    with open(path, "rb") as fh:
        return decode(fh.read())
