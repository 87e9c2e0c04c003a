"""Binary file formats: AMAP anomaly maps and 8/16-bit Netpbm images.

AMAP layout (all little-endian)::

    offset 0   5 bytes   ASCII "AMAP1"
    offset 5   uint32    width
    offset 9   uint32    height
    offset 13  float32 * width * height, row-major

Readers reject anything that does not match exactly; nothing is truncated
and continued.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .core import AnomalyMap, SegmentationMap
from .errors import (
    BadMagicError,
    FormatError,
    NonFiniteValueError,
    TruncatedFileError,
)

AMAP_MAGIC = b"AMAP1"
_AMAP_HEADER = struct.Struct("<5sII")


def encode_amap(amap: AnomalyMap) -> bytes:
    """Serialize to AMAP bytes. Values are stored as float32."""
    values = np.asarray(amap.values, dtype="<f4")
    if not np.all(np.isfinite(values)):
        idx = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NonFiniteValueError(idx, f"value at pixel index {idx} overflows float32")
    return _AMAP_HEADER.pack(AMAP_MAGIC, amap.width, amap.height) + values.tobytes(order="C")


def decode_amap(data: bytes, source: str = "<bytes>") -> AnomalyMap:
    if len(data) < len(AMAP_MAGIC) or data[:len(AMAP_MAGIC)] != AMAP_MAGIC:
        raise BadMagicError(f"{source}: not an AMAP file (magic {data[:5]!r})")
    if len(data) < _AMAP_HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated ({len(data)} bytes)")
    _, width, height = _AMAP_HEADER.unpack_from(data)
    if width == 0 or height == 0:
        raise FormatError(f"{source}: zero dimension {width}x{height}")
    expected = _AMAP_HEADER.size + 4 * width * height
    if len(data) < expected:
        raise TruncatedFileError(f"{source}: payload truncated, {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise FormatError(f"{source}: {len(data) - expected} trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f4", offset=_AMAP_HEADER.size).reshape(height, width)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValueError(int(bad[0]), f"{source}: non-finite value at pixel index {int(bad[0])}")
    return AnomalyMap(values.astype(np.float32))


def write_amap(amap: AnomalyMap, path) -> None:
    Path(path).write_bytes(encode_amap(amap))


def read_amap(path) -> AnomalyMap:
    return decode_amap(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------- #
# Netpbm: P5 (gray, maxval <= 65535) and P6 (RGB, 8-bit)

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(data: bytes, source: str) -> tuple[bytes, int, int, int, int]:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"{source}: expected P5 or P6 magic, got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFileError(f"{source}: header truncated")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{source}: bad header token {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedFileError(f"{source}: header not terminated")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{source}: invalid header {width}x{height} maxval {maxval}")
    return data[:2], width, height, maxval, pos


def decode_pnm(data: bytes, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into ``(pixels, maxval)``; RGB yields shape (H, W, 3)."""
    magic, width, height, maxval, pos = _parse_netpbm(data, source)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * channels * dtype.itemsize
    payload = data[pos:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{source}: raster truncated, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after raster")
    pixels = np.frombuffer(payload, dtype=dtype).reshape((height, width, channels) if channels == 3 else (height, width))
    pixels = pixels.astype(np.uint16 if maxval > 255 else np.uint8)
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"{source}: pixel value exceeds maxval {maxval}")
    return pixels, maxval


def encode_pnm(pixels: np.ndarray, maxval: int | None = None) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {pixels.shape} as PGM/PPM")
    if maxval is None:
        maxval = 255 if pixels.dtype == np.uint8 else 65535
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise FormatError(f"pixel values outside [0, {maxval}]")
    if magic == b"P6" and maxval > 255:
        raise FormatError("16-bit PPM is not supported")
    raster = pixels.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + raster


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), str(path))[0]


def write_pnm(pixels: np.ndarray, path, maxval: int | None = None) -> None:
    Path(path).write_bytes(encode_pnm(pixels, maxval))


def read_segmap(path) -> SegmentationMap:
    """Read an 8-bit P5 PGM whose pixel values are segment indices."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise BadMagicError(f"{path}: segmentation maps must be P5 PGM, got magic {data[:2]!r}")
    pixels, maxval = decode_pnm(data, str(path))
    if maxval > 255:
        raise FormatError(f"{path}: segmentation maps must be 8-bit")
    return SegmentationMap(pixels.astype(np.int32))


def write_segmap(seg: SegmentationMap, path) -> None:
    if seg.num_segments > 256:
        raise FormatError("an 8-bit PGM holds at most 256 segments")
    write_pnm(seg.labels.astype(np.uint8), path, maxval=255)


def amap_from_pgm16(path) -> AnomalyMap:
    """Convert a 16-bit grayscale PGM into an anomaly map scaled by 1/65535."""
    pixels, maxval = decode_pnm(Path(path).read_bytes(), str(path))
    if pixels.ndim != 2:
        raise FormatError(f"{path}: expected grayscale P5")
    return AnomalyMap((pixels.astype(np.float64) / 65535.0).astype(np.float32))
