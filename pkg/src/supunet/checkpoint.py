"""Binary checkpoint format.

All integers and reals are little-endian::

    magic          4 bytes  b"UNBK"
    version        u32      (1)
    config         u32 in_channels, num_classes, depth, base_channels,
                   fc_hidden, height, width; f64 lambda_bottleneck
    tensor count   u64
    per tensor     u32 name length, name (UTF-8), u32 ndim, u32 dims...,
                   f32 values in row-major order

Tensors appear in registry order. Parameters are stored in single precision,
so a loaded model holds exactly the float32-rounded values.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from supunet.model import UNet, UNetConfig

MAGIC = b"UNBK"
VERSION = 1
_CONFIG = struct.Struct("<7Id")


class CheckpointError(ValueError):
    pass


def encode(model: UNet) -> bytes:
    cfg = model.config
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        _CONFIG.pack(
            cfg.in_channels, cfg.num_classes, cfg.depth, cfg.base_channels,
            cfg.fc_hidden, cfg.input_size[0], cfg.input_size[1], cfg.lambda_bottleneck,
        ),
        struct.pack("<Q", len(model.params)),
    ]
    for p in model.params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        chunks.append(p.value.astype("<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode(data: bytes) -> UNet:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cin, ncls, depth, base, hidden, h, w, lam = r.unpack(_CONFIG.format, "config")
    config = UNetConfig(
        input_size=(h, w), in_channels=cin, num_classes=ncls, depth=depth,
        base_channels=base, fc_hidden=hidden, lambda_bottleneck=lam,
    )
    model = UNet(config)
    (count,) = r.unpack("<Q", "tensor count")
    if count != len(model.params):
        raise CheckpointError(f"checkpoint has {count} tensors, architecture expects {len(model.params)}")
    for p in model.params:
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        if name != p.name:
            raise CheckpointError(f"expected tensor {p.name!r}, found {name!r}")
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        if tuple(shape) != p.value.shape:
            raise CheckpointError(f"{name}: stored shape {shape} != expected {p.value.shape}")
        raw = r.take(4 * p.value.size, f"{name} values")
        p.value[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return model


def save(path: os.PathLike, model: UNet) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(model))


def load(path: os.PathLike) -> UNet:
    with open(path, "rb") as fh:
        return decode(fh.read())
