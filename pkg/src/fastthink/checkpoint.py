"""Versioned binary checkpoints with integrity checks.

Layout (all integers little-endian):

    magic   4 bytes  b"LCFT"
    u16     format version (currently 1)
    u32     config digest of the writing run
    u32     tensor count
    per tensor, sorted by name:
        u16   name length, then UTF-8 name
        u8    ndim, then ndim * u32 dims
        float32 row-major values
    u32     CRC-32 over every tensor-record byte above

Values are stored at 32-bit width, so save/load round-trips are bitwise
exact for float32 states. A load either returns the complete state or
raises a typed error; nothing partial escapes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
import torch

from .errors import CorruptionError, DigestMismatchError, VersionError

MAGIC = b"LCFT"
VERSION = 1


def _to_f32(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype=np.float32)
    return np.ascontiguousarray(arr)


def save_checkpoint(state: dict, path, config_digest: int = 0) -> None:
    """Write named tensors; non-float inputs are cast to float32."""
    records = bytearray()
    for name in sorted(state):
        arr = _to_f32(state[name])
        encoded = name.encode("utf-8")
        records += struct.pack("<H", len(encoded)) + encoded
        records += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            records += struct.pack("<I", dim)
        records += arr.tobytes(order="C")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", config_digest & 0xFFFFFFFF))
        f.write(struct.pack("<I", len(state)))
        f.write(records)
        f.write(struct.pack("<I", zlib.crc32(bytes(records)) & 0xFFFFFFFF))


def load_checkpoint(path, expected_digest: int | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; raises CorruptionError / VersionError /
    DigestMismatchError instead of returning partial state."""
    with open(path, "rb") as f:
        blob = f.read()

    def take(fmt: str, offset: int):
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CorruptionError("checkpoint truncated")
        return struct.unpack_from(fmt, blob, offset), offset + size

    if blob[:4] != MAGIC:
        raise CorruptionError(f"bad magic {blob[:4]!r}")
    offset = 4
    (version,), offset = take("<H", offset)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (digest,), offset = take("<I", offset)
    if expected_digest is not None and digest != (expected_digest & 0xFFFFFFFF):
        raise DigestMismatchError(
            f"checkpoint written under config digest {digest:#010x}, "
            f"expected {expected_digest & 0xFFFFFFFF:#010x}"
        )
    (count,), offset = take("<I", offset)

    records_start = offset
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,), offset = take("<H", offset)
        if offset + name_len > len(blob):
            raise CorruptionError("checkpoint truncated inside a tensor name")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,), offset = take("<B", offset)
        dims = []
        for _ in range(ndim):
            (d,), offset = take("<I", offset)
            dims.append(d)
        n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = 4 * n_values
        if offset + nbytes > len(blob):
            raise CorruptionError(f"checkpoint truncated inside tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset).copy()
        state[name] = arr.reshape(dims)
        offset += nbytes

    (stored_crc,), end = take("<I", offset)
    if end != len(blob):
        raise CorruptionError("trailing bytes after checksum")
    actual = zlib.crc32(blob[records_start:offset]) & 0xFFFFFFFF
    if actual != stored_crc:
        raise CorruptionError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
        )
    return state


def save_model(model: torch.nn.Module, path, config_digest: int = 0) -> None:
    save_checkpoint({k: v for k, v in model.state_dict().items()}, path, config_digest)


def load_model(model: torch.nn.Module, path, expected_digest: int | None = None) -> None:
    state = load_checkpoint(path, expected_digest)
    reference = model.state_dict()
    tensors = {}
    for name, values in state.items():
        t = torch.from_numpy(values)
        if name in reference:
            t = t.to(dtype=reference[name].dtype).reshape(reference[name].shape)
        tensors[name] = t
    model.load_state_dict(tensors)
