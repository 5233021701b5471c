"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"PALE"  u32 version  u32 tensor_count
    per tensor:
        u16 name_len, name (UTF-8)
        u8 dtype code (0 = float32, 1 = float64)
        u8 rank, rank x u64 extents
        raw IEEE-754 payload, little-endian, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"PALE"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def encode(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(getattr(t, "data", t))
        if arr.dtype not in CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        code = CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(model_or_tensors, path: str | Path) -> None:
    tensors = model_or_tensors.state_dict() if hasattr(model_or_tensors, "state_dict") else model_or_tensors
    Path(path).write_bytes(encode(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_model(path: str | Path, config):
    """Rebuild a :class:`~pale.backbone.PaleTransformer` for ``config`` from a file."""
    from .backbone import model_from_state

    return model_from_state(config, load_checkpoint(path))
