"""Bit-exact binary tensor container (CPK1).

Layout, all integers little-endian:

    magic   4 bytes  b"CPK1"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u32, name utf-8 bytes,
        dtype    u8   (0 = IEEE-754 binary32),
        rank     u32, extents u64 each,
        data     raw little-endian values
    crc32   u32      of every preceding byte

Round trips are byte-identical; loads verify magic, version, and CRC and
raise a distinct error per failure mode.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"CPK1"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def serialize(named: dict[str, np.ndarray]) -> bytes:
    seen = set()
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        if not name:
            raise ValueError("serialize: tensor names must be non-empty")
        if name in seen:
            raise ValueError(f"serialize: duplicate tensor name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F32, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise TruncatedError(f"container too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CrcMismatchError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")

    pos = 12
    end = len(blob) - 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise TruncatedError(f"container truncated at byte {pos} (need {n} more)")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype_code, rank = struct.unpack("<BI", take(5))
        if dtype_code != DTYPE_F32:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        out[name] = data.astype(np.float32)  # native-endian writable copy
    if pos != end:
        raise TruncatedError(f"{end - pos} trailing bytes after last entry")
    return out


def save_checkpoint(named: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
