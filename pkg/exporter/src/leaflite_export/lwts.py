"""Writer/reader for the portable LWTS weight container.

This is an independent implementation of the wire format the inference
engine consumes: magic "LWTS", u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 dtype (0 = float32), u8 rank,
u32 dims[rank], raw little-endian payload; CRC32 of everything after the
magic as the trailer. Write order is preserved, so a canonical order
yields byte-identical files.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"LWTS"
VERSION = 1


def write(tensors: dict[str, np.ndarray], path) -> None:
    body = bytearray()
    body += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<BB", 0, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    body = data[4:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", data[-4:])[0]:
        raise ValueError(f"{path}: checksum mismatch")
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        _dtype, rank = take("<BB")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
    return tensors
