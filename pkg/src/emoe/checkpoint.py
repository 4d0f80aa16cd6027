"""Versioned binary checkpoint container.

Layout (all integers little-endian u32)::

    b"EMOE" | version | len(config) | config text (UTF-8)
    | tensor count | { len(name) | name | rows | cols | rows*cols float64 LE }*
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .vit import ViT, ViTConfig

MAGIC = b"EMOE"
VERSION = 1
_U32 = struct.Struct("<I")


def save(path, config: ViTConfig, tensors: dict) -> None:
    """Write ``tensors`` (name -> 2D array) with the model config; names are sorted."""
    text = config.to_text().encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(text)), text, _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} must be 2D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.shape[0]), _U32.pack(arr.shape[1]), arr.tobytes(order="C")]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load(path):
    """Return ``(config, tensors)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an EMOE checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = ViTConfig.from_text(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rows, cols = r.u32(), r.u32()
        tensors[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return config, tensors


def save_model(path, model: ViT, extra: dict | None = None) -> None:
    tensors = dict(model.state())
    for k, v in (extra or {}).items():
        tensors[k] = v
    save(path, model.config, tensors)


def load_model(path):
    """Return ``(model, extra)``; ``extra`` holds tensors that are not model parameters."""
    config, tensors = load(path)
    model = ViT(config, rng=np.random.default_rng(0))
    names = set(model.params)
    missing = names - set(tensors)
    if missing:
        raise FormatError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    model.load_state({n: tensors[n] for n in names})
    return model, {k: v for k, v in tensors.items() if k not in names}
