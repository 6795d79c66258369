"""Image and raw-array file IO.

Two formats:

* 8-bit PNG for viewable images, via Pillow. Float images in [0, 1] are
  rounded to 8 bits on write and mapped back to [0, 1] on read.
* Raw float blocks for lossless arrays. Layout: 8-byte magic ``ASPLATRW``,
  one dtype tag byte (1 = little-endian float32, 2 = little-endian float64),
  one byte ndim, ndim little-endian uint32 dims, then the row-major data.
"""
from __future__ import annotations

import struct

import numpy as np
from PIL import Image

RAW_MAGIC = b"ASPLATRW"
_DTYPE_TAGS = {1: "<f4", 2: "<f8"}
_TAG_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_png(path, image):
    """Write a float image in [0, 1] (H×W×3 or H×W) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype.kind == "f":
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise ValueError(f"write_png: unsupported dtype {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path):
    """Read a PNG into a float64 array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB")
                         else img)
    return arr.astype(np.float64) / 255.0


def write_raw(path, array):
    """Write a float array losslessly in the documented raw-block format."""
    arr = np.ascontiguousarray(array)
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise ValueError(f"write_raw: dtype must be float32/float64, got {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<BB", tag, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw(path):
    """Read a raw float block written by write_raw."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(RAW_MAGIC) + 2 or blob[:len(RAW_MAGIC)] != RAW_MAGIC:
        raise ValueError(f"not a raw float block: {path}")
    tag, ndim = struct.unpack_from("<BB", blob, len(RAW_MAGIC))
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag} in {path}")
    off = len(RAW_MAGIC) + 2
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    dtype = np.dtype(_DTYPE_TAGS[tag])
    need = off + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(blob) != need:
        raise ValueError(f"raw block length {len(blob)} != expected {need}: {path}")
    return np.frombuffer(blob, dtype=dtype, offset=off).reshape(shape).copy()
