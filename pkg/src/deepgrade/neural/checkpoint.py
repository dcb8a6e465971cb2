"""GNN1 checkpoint files: a flat list of named float32 arrays.

Layout (little-endian)::

    b"GNN1" | count:u32 | per array: name_len:u32, name (UTF-8),
    rank:u32, dims (rank x u32), payload (prod(dims) x f32, C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, IoError

MAGIC = b"GNN1"


def encode_arrays(arrays) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(blob: bytes, source="<bytes>"):
    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{source}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise FormatError(f"{source}: bad magic, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        arrays[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{source}: {len(blob) - pos} trailing bytes")
    return arrays


def save_arrays(arrays, path):
    try:
        Path(path).write_bytes(encode_arrays(arrays))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_arrays(blob, path)
