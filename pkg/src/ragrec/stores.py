"""Binary embedding store ("RREC" format) and projector checkpoint I/O.

Store layout, all little-endian:

    offset  size  field
    0       4     magic b"RREC"
    4       2     format version (u16), currently 1
    6       4     row count (u32)
    10      4     dimension (u32)
    14      8     template hash (u64); 0 when no prompt template is involved
    22      -     count * dim float32 values, row-major

Rows are stored in dense id order, so the store carries no id column; the
corpus index provides the id <-> row mapping.  Round-trips are bit-exact:
vectors are cast to float32 on write and returned unchanged on read.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, StoreError

MAGIC = b"RREC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")


def template_hash(text: str) -> int:
    """Stable 64-bit hash of a prompt template, used for cache invalidation."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def write_store(path: str | Path, matrix: np.ndarray, template_hash_value: int = 0) -> None:
    """Write a (count, dim) matrix atomically as an RREC store."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ContractError(f"store matrix must be 2-d, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ContractError("store matrix contains non-finite values")
    count, dim = matrix.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, count, dim, template_hash_value)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(matrix.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def read_header(path: str | Path) -> tuple[int, int, int]:
    """Return (count, dim, template_hash) without loading the rows."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, count, dim, thash = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreError(f"{path}: unsupported format version {version}")
    return count, dim, thash


def read_store(path: str | Path) -> tuple[np.ndarray, int]:
    """Read an RREC store; returns (matrix float32 (count, dim), template_hash)."""
    count, dim, thash = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        data = fh.read()
    expected = count * dim * 4
    if len(data) != expected:
        raise StoreError(f"{path}: expected {expected} payload bytes, found {len(data)}")
    matrix = np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()
    return matrix, thash


def file_digest(path: str | Path) -> str:
    """Content hash of any artifact file, used by the stage cache."""
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_checkpoint(path: str | Path, header: dict, arrays: list[np.ndarray]) -> None:
    """Write a parameter checkpoint: u32 JSON-header length, JSON, f32 blob.

    The header must contain enough shape information to slice the blob back
    into the original arrays (see ``read_checkpoint``).
    """
    header = dict(header)
    header["shapes"] = [list(a.shape) for a in arrays]
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    """Read a checkpoint written by ``write_checkpoint``."""
    with open(path, "rb") as fh:
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise StoreError(f"{path}: truncated checkpoint")
        (hlen,) = struct.unpack("<I", raw_len)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    arrays = []
    offset = 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        arrays.append(arr)
        offset += n * 4
    if offset != len(blob):
        raise StoreError(f"{path}: checkpoint blob size mismatch")
    return header, arrays
