"""SEGV: a small little-endian container for image and label volumes.

Layout::

    b"SEGV"  u16 version(=1)  u8 dtype(0=f32, 1=u8)  u8 ndim
    ndim x u32 dims
    u32 meta length, UTF-8 meta ("key=value" lines)
    raw voxels, row-major, channels first
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SEGV"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DTYPE_CODES = {"f32": 0, "u8": 1}


class SegvError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class Volume:
    """Channels-first voxel array (C, H, W, D) plus free-form metadata."""

    voxels: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.voxels.dtype not in (np.float32, np.uint8):
            raise ValueError(f"volume dtype must be float32 or uint8, got {self.voxels.dtype}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.voxels.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.voxels.dtype == np.float32 else "u8"

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.voxels.dtype == other.voxels.dtype
            and self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
            and self.meta == other.meta
        )


def _encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"meta entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes, offset: int) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SegvError("meta is not valid UTF-8", offset) from exc
    meta = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SegvError(f"meta line {line!r} has no '='", offset)
        meta[key] = value
    return meta


def write_record(fh: BinaryIO, voxels: np.ndarray, meta: dict[str, str]):
    code = 0 if voxels.dtype == np.float32 else 1
    if voxels.dtype not in (np.float32, np.uint8):
        raise ValueError(f"unsupported dtype {voxels.dtype}")
    meta_bytes = _encode_meta(meta)
    fh.write(MAGIC)
    fh.write(struct.pack("<HBB", VERSION, code, voxels.ndim))
    fh.write(struct.pack(f"<{voxels.ndim}I", *voxels.shape))
    fh.write(struct.pack("<I", len(meta_bytes)))
    fh.write(meta_bytes)
    fh.write(np.ascontiguousarray(voxels, dtype=DTYPES[code]).tobytes())


def read_record(buf: bytes, offset: int = 0) -> tuple[np.ndarray, dict[str, str], int]:
    """Parse one record starting at ``offset``; returns (voxels, meta, next offset)."""

    def need(n: int, what: str):
        if offset + n > len(buf):
            raise SegvError(f"truncated {what}: need {n} bytes, {len(buf) - offset} left", offset)

    need(4, "magic")
    if buf[offset:offset + 4] != MAGIC:
        raise SegvError("bad magic", offset)
    offset += 4
    need(4, "header")
    version, code, ndim = struct.unpack_from("<HBB", buf, offset)
    if version != VERSION:
        raise SegvError(f"unsupported version {version}", offset)
    if code not in DTYPES:
        raise SegvError(f"unknown dtype code {code}", offset + 2)
    offset += 4
    need(4 * ndim, "dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    if any(d < 1 for d in dims):
        raise SegvError(f"dims {dims} must be positive", offset)
    offset += 4 * ndim
    need(4, "meta length")
    (meta_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    need(meta_len, "meta")
    meta = _decode_meta(bytes(buf[offset:offset + meta_len]), offset)
    offset += meta_len
    dtype = DTYPES[code]
    count = math.prod(dims)
    available = (len(buf) - offset) // dtype.itemsize
    if available < count:
        raise SegvError(f"truncated payload: expected {count} voxels, found {available}", offset)
    voxels = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    voxels = voxels.astype(dtype.newbyteorder("="), copy=True)
    return voxels, meta, offset + count * dtype.itemsize


def save_volume(v: Volume, path):
    with open(path, "wb") as fh:
        write_record(fh, v.voxels, v.meta)


def load_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    voxels, meta, end = read_record(buf)
    if end != len(buf):
        raise SegvError(f"{len(buf) - end} trailing bytes", end)
    return Volume(voxels, meta)
