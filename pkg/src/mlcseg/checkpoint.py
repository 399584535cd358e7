"""Binary checkpoint serialization.

Layout, all integers unsigned 32-bit little-endian: magic ``MLCS``, format
version, tensor count, then per tensor: name length, UTF-8 name, dtype tag
(0 = float32, 1 = float64), rank, one extent per axis, raw little-endian
payload. Tensor order is preserved, and a round trip is bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MLCS"
VERSION = 1

_DTYPE_BY_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = _TAG_BY_KIND.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise ValueError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<II", tag, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(_DTYPE_BY_TAG[tag], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<II", take(8))
        dtype = _DTYPE_BY_TAG.get(tag)
        if dtype is None:
            raise ValueError(f"{path}: tensor '{name}' has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        data = take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name '{name}'")
        arr = np.frombuffer(data, dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after last tensor")
    return tensors
