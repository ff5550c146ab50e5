"""FMAP binary container for feature maps.

Layout (all little-endian)::

    b"FMAP" | u32 version (=1) | u32 ndims | ndims * u32 dims | f32 stride | f32 payload

The payload is row-major. Feature maps are always written with ndims = 3.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import FeatureMap

MAGIC = b"FMAP"
VERSION = 1
MAX_NDIMS = 8
MAX_ELEMENTS = 2**31 - 1


class FmapError(ValueError):
    pass


class BadMagicError(FmapError):
    pass


class UnsupportedVersionError(FmapError):
    pass


class TruncatedPayloadError(FmapError):
    pass


class DimOverflowError(FmapError):
    pass


def encode_fmap(fmap: FeatureMap) -> bytes:
    dims = fmap.shape
    header = MAGIC + struct.pack("<II", VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    header += struct.pack("<f", fmap.stride)
    return header + fmap.data.astype("<f4").tobytes(order="C")


def decode_fmap(buf: bytes) -> FeatureMap:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not an FMAP file")
    if len(buf) < 12:
        raise TruncatedPayloadError("truncated header")
    version, ndims = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported FMAP version {version}")
    if ndims < 1 or ndims > MAX_NDIMS:
        raise DimOverflowError(f"dim overflow: ndims={ndims}")
    off = 12
    if len(buf) < off + 4 * ndims + 4:
        raise TruncatedPayloadError("truncated header")
    dims = struct.unpack_from(f"<{ndims}I", buf, off)
    off += 4 * ndims
    (stride,) = struct.unpack_from("<f", buf, off)
    off += 4
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"dim overflow: dims {dims} exceed {MAX_ELEMENTS} elements")
    if count == 0:
        raise DimOverflowError(f"zero-sized dims {dims}")
    have = (len(buf) - off) // 4
    if have < count or (len(buf) - off) % 4:
        raise TruncatedPayloadError(f"truncated payload: header declares {count} floats, found {have}")
    if have > count:
        raise FmapError(f"trailing bytes after {count} floats")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
    if ndims != 3:
        data = data.reshape((1,) * (3 - ndims) + tuple(dims)) if ndims < 3 else None
        if data is None:
            raise FmapError(f"feature maps are 3-d, file has {ndims} dims")
    else:
        data = data.reshape(dims)
    return FeatureMap(data, stride)


def write_fmap(path: str | os.PathLike, fmap: FeatureMap) -> None:
    with open(path, "wb") as f:
        f.write(encode_fmap(fmap))


def read_fmap(path: str | os.PathLike) -> FeatureMap:
    with open(path, "rb") as f:
        return decode_fmap(f.read())
