"""Library-free raster formats.

F32R  depth:  b"F32R", u32 version=1, u32 H, u32 W, H*W float32, all LE
U8R1  mask:   b"U8R1", u32 H, u32 W, H*W bytes
PPM   rgb:    binary P6, maxval 255
PGM   gray:   binary P5, maxval 255
"""

from __future__ import annotations

import os
import re
import struct

import numpy as np

F32R_MAGIC = b"F32R"
U8R_MAGIC = b"U8R1"
F32R_VERSION = 1
MAX_EXTENT = 1 << 16


class FormatError(ValueError):
    """A raster file is malformed."""


def _check_dims(path, h: int, w: int) -> None:
    if not (0 < h <= MAX_EXTENT and 0 < w <= MAX_EXTENT):
        raise FormatError(f"{path}: dimensions {h}x{w} out of range")


def write_f32r(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"F32R holds a 2-D raster, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(F32R_MAGIC + struct.pack("<III", F32R_VERSION, h, w))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_f32r(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != F32R_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {F32R_MAGIC!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, h, w = struct.unpack_from("<III", blob, 4)
    if version != F32R_VERSION:
        raise FormatError(f"{path}: unsupported F32R version {version}")
    _check_dims(path, h, w)
    payload = blob[16:]
    if len(payload) != 4 * h * w:
        raise FormatError(f"{path}: truncated payload, {len(payload)} bytes for {h}x{w} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def write_u8r(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"U8R1 holds a 2-D raster, got shape {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(U8R_MAGIC + struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_u8r(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != U8R_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {U8R_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", blob, 4)
    _check_dims(path, h, w)
    payload = blob[12:]
    if len(payload) != h * w:
        raise FormatError(f"{path}: truncated payload, {len(payload)} bytes for {h}x{w} mask")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def _write_pnm(path, magic: bytes, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


_PNM_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = _PNM_HEADER.match(blob)
    if m is None or m.group(1) != magic:
        raise FormatError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    _check_dims(path, h, w)
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    payload = blob[m.end():]
    if len(payload) != h * w * channels:
        raise FormatError(f"{path}: truncated payload, {len(payload)} bytes for {h}x{w}x{channels}")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is H x W x 3 uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs H x W x 3, got {rgb.shape}")
    _write_pnm(path, b"P6", rgb)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs H x W, got {gray.shape}")
    _write_pnm(path, b"P5", gray)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
