"""Binary named-tensor container.

Layout (little-endian)::

    b"CCBT" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank | u64 dims[rank] | payload
    u64 checksum (BLAKE2b-64 of every preceding byte)

dtype codes: 0 = f64, 1 = u64, 2 = u8.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CCBT"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u8"), 2: np.dtype("u1")}
CODES = {np.dtype("float64"): 0, np.dtype("uint64"): 1, np.dtype("uint8"): 2}


class CheckpointError(ValueError):
    pass


def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 20:
        raise CheckpointError(f"checkpoint truncated ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    off = 12
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if off + n > len(body):
            raise CheckpointError(f"checkpoint truncated while reading {what}")

    for i in range(count):
        need(4, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        need(nlen + 2, f"tensor {i} header")
        name = body[off : off + nlen].decode("utf-8", errors="replace")
        off += nlen
        code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        need(8 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}Q", body, off)
        off += 8 * rank
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"{name} payload")
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} unexpected trailing bytes before checksum")
    if checksum(body) != stored:
        raise CheckpointError("checksum mismatch: checkpoint payload is corrupt")
    return out


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
