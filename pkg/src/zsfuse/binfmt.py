"""Section-tagged little-endian binary container with a trailing CRC32.

Layout::

    magic (4 bytes) | version u16
    repeated: tag_len u16 | tag utf-8 | dtype u8 ('d' f64, 'i' i32, 'b' raw bytes)
              | ndim u32 | dims u32 * ndim | payload
    crc32 u32 over everything before it
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_DTYPES = {b"d": np.dtype("<f8"), b"i": np.dtype("<i4"), b"b": np.dtype("u1")}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(magic: bytes, version: int, sections: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray(magic)
    out += struct.pack("<H", version)
    for tag, arr in sections:
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            code = b"d"
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            code = b"i"
        else:
            code = b"b"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        name = tag.encode("utf-8")
        out += struct.pack("<H", len(name)) + name + code
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode(blob: bytes, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    head = len(magic) + 2
    if len(blob) < head + 4:
        raise FormatError("file truncated before header end", len(blob))
    if blob[: len(magic)] != magic:
        raise FormatError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}", 0)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch (file truncated or corrupted)", len(blob) - 4)
    (version,) = struct.unpack_from("<H", blob, len(magic))
    pos = head
    sections: dict[str, np.ndarray] = {}

    def need(n: int):
        if pos + n > len(body):
            raise FormatError(f"section data truncated: need {n} bytes", pos)

    while pos < len(body):
        need(2)
        (tlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(tlen + 5)
        tag = body[pos:pos + tlen].decode("utf-8")
        pos += tlen
        code = body[pos:pos + 1]
        pos += 1
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r} in section {tag!r}", pos - 1)
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        sections[tag] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return version, sections


def write_file(path: str | Path, magic: bytes, version: int, sections: list[tuple[str, np.ndarray]]) -> bytes:
    blob = encode(magic, version, sections)
    Path(path).write_bytes(blob)
    return blob


def read_file(path: str | Path, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
