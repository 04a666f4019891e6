"""HTMN named-tensor checkpoints.

Layout, all little-endian::

    b"HTMN", u32 version=1, u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype, u8 rank,
                rank x u32 dims, payload
    u64 FNV-1a checksum of every preceding byte

dtype 0 is float32 and 1 is float64. Tensors are written in sorted name
order so the bytes depend only on the parameter values.
"""

from __future__ import annotations

import struct

import numpy as np

from .formats import FormatError

MAGIC = b"HTMN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def encode(tensors: dict) -> bytes:
    """Serialize a name -> array mapping to HTMN bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        code = DTYPE_CODES.get(array.dtype)
        if code is None:
            raise ValueError(f"checkpoint tensor {name}: unsupported dtype {array.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"checkpoint tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes, path="<bytes>") -> dict:
    """Parse HTMN bytes, verifying magic, version and checksum."""
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (length,) = r.unpack("<H")
        name = r.take(length).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        dtype = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(size), dtype=dtype).reshape(shape)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name}")
        tensors[name] = data.astype(dtype.newbyteorder("="))
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} trailing bytes before checksum")
    return tensors


def save(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(encode(tensors))


def load(path) -> dict:
    with open(path, "rb") as f:
        return decode(f.read(), path)


def save_model(path, model) -> None:
    save(path, model.state_dict())


def load_model(path, model) -> None:
    """Load parameters in place; names and shapes must match exactly."""
    model.load_state_dict(load(path))
