"""Binary tensor container.

Layout (all integers little-endian):

    magic  b"KPNF"
    version u32
    repeated until EOF:
        name_len u32 | name UTF-8 | rank u32 | dims u64 * rank | payload f32 LE

Tensors are written sorted by name and stored as 32-bit floats, so
save -> load -> save is byte-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from kpnf.errors import InputValidationError, NonFiniteValueError

MAGIC = b"KPNF"
FORMAT_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    blobs = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"tensor {name!r} contains non-finite values")
        encoded = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<I", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blobs.append(arr.tobytes())
    path.write_bytes(b"".join(blobs))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InputValidationError(f"{path}: bad magic bytes, not a KPNF container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise InputValidationError(f"{path}: unsupported container version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in tensors:
            raise InputValidationError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr.astype(np.float32)
    return tensors
