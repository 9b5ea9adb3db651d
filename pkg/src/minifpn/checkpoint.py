"""Binary parameter serialization.

Layout: magic "MFPN", format version (u32), parameter count (u32), then per
parameter: name length (u16), UTF-8 name, rank (u8), each dim (u32), and the
values as little-endian float32 in C order. All integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError

MAGIC = b"MFPN"
FORMAT_VERSION = 1


def save_arrays(path, named_arrays) -> None:
    """Write an ordered mapping of name -> ndarray to `path`."""
    items = list(named_arrays.items())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, arr in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointMismatchError(f"parameter name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path):
    """Read a checkpoint back as an ordered dict of name -> float32 ndarray."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointMismatchError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        out[name] = values.reshape(dims).astype(np.float32)
    if offset != len(blob):
        raise CheckpointMismatchError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


def save_params(path, params) -> None:
    """Serialize model parameters in their registration order."""
    save_arrays(path, {p.name: p.data for p in params})


def load_params(path, params) -> None:
    """Load a checkpoint into `params`, requiring an exact name/shape match."""
    stored = load_arrays(path)
    problems = []
    by_name = {p.name: p for p in params}
    for name in stored:
        if name not in by_name:
            problems.append(f"{name} (in file, not in model)")
    for p in params:
        if p.name not in stored:
            problems.append(f"{p.name} (in model, not in file)")
        elif stored[p.name].shape != p.data.shape:
            problems.append(
                f"{p.name} (file {stored[p.name].shape}, model {p.data.shape})")
    if problems:
        raise CheckpointMismatchError(
            "checkpoint does not match model: " + "; ".join(sorted(problems)))
    for p in params:
        p.data = stored[p.name].astype(p.data.dtype)
        p.grad = None
