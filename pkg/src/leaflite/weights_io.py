"""Portable binary weight container.

Layout (little-endian): magic "LWTS"; u32 version; u32 tensor count;
per tensor u16 name length, UTF-8 name, u8 dtype code (0 = float32),
u8 rank, u32 dims[rank], raw payload; then CRC32 (u32) of everything
after the magic. Tensors keep their write order, so a fixed write order
gives byte-identical files.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import InputError, WeightFormatError

MAGIC = b"LWTS"
VERSION = 1
DTYPE_F32 = 0


def write_weights(tensors: dict[str, np.ndarray], path) -> None:
    body = bytearray()
    body += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<BB", DTYPE_F32, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError("truncated", f"{self.path}: truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read weight file {path}: {exc}") from exc

    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise WeightFormatError("magic", f"{path}: not a LWTS weight file")
    body, stored_crc = data[len(MAGIC) : -4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError("checksum", f"{path}: checksum mismatch")

    r = _Reader(body, path)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise WeightFormatError("version", f"{path}: unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_code, rank = r.unpack("<BB")
        if dtype_code != DTYPE_F32:
            raise WeightFormatError("version", f"{path}: unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise WeightFormatError("value", f"{path}: tensor {name} has non-finite values")
        tensors[name] = arr
    if r.pos != len(body):
        raise WeightFormatError("truncated", f"{path}: {len(body) - r.pos} trailing bytes")
    return tensors
