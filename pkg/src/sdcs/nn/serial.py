"""Binary container for model parameters.

Layout (all integers little-endian):

    magic     4 bytes   b"SDCS" for network weights, b"SVM1" for SVM models
    version   u32       format version, currently 1
    count     u32       number of records
    records   count x [ tag_len u16 | tag UTF-8 | ndim u32 | dims u32... |
                        payload float32 LE, row-major ]

Each record is one named parameter array ("<layer kind>:<role>" tags for
networks). Float32 payloads round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_NETWORK = b"SDCS"
MAGIC_SVM = b"SVM1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Corrupt or mismatched model container."""


def save_records(
    path: str | Path, records: list[tuple[str, np.ndarray]], magic: bytes = MAGIC_NETWORK
) -> None:
    if len(magic) != 4:
        raise ContainerError(f"magic must be 4 bytes, got {magic!r}")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(records))
    for tag, arr in records:
        raw = tag.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype=np.float32)
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<I", a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape)
        blob += a.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_records(
    path: str | Path, magic: bytes = MAGIC_NETWORK
) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ContainerError(f"{path}: truncated container ({len(data)} bytes)")
    if data[:4] != magic:
        raise ContainerError(f"{path}: magic {data[:4]!r} != expected {magic!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    records = []
    for _ in range(count):
        (tag_len,) = struct.unpack_from("<H", data, off)
        off += 2
        tag = data[off : off + tag_len].decode("utf-8")
        off += tag_len
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        records.append((tag, arr.astype(np.float32)))
    if off != len(data):
        raise ContainerError(f"{path}: {len(data) - off} trailing bytes")
    return records
