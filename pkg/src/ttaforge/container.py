"""Versioned binary container for model checkpoints, statistics and datasets.

Layout, all little-endian:

    magic   8 bytes  b"TTAFORGE"
    version u32
    hlen    u64      length of the JSON header in bytes
    header  hlen bytes, UTF-8 JSON: {"meta": {...}, "arrays": [{name, shape, dtype}, ...]}
    payload raw array bytes, back to back, in header order
    crc     u32      CRC-32 of everything before it

Arrays are stored as little-endian float64 or int64. The trailing checksum
covers magic, version, header and payload, so a single flipped byte anywhere
is detected on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import Mapping

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container", "FORMAT_VERSION"]

MAGIC = b"TTAFORGE"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerError(RuntimeError):
    """Raised for unreadable, truncated, corrupt or incompatible files."""


def _canonical(arr: np.ndarray) -> tuple[np.ndarray, str]:
    dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_ else "<f8"
    # ascontiguousarray promotes 0-d to 1-d; reshape restores the true shape.
    return np.ascontiguousarray(arr, dtype=dtype).reshape(arr.shape), dtype


def write_container(path: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    """Serialize ``meta`` and named arrays to ``path`` with a trailing checksum."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        canon, dtype = _canonical(np.asarray(arr))
        entries.append({"name": name, "shape": list(canon.shape), "dtype": dtype})
        blobs.append(canon.tobytes())
    header = json.dumps({"meta": dict(meta), "arrays": entries}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and verify a container, returning (meta, name -> array)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise ContainerError(f"{path}: cannot read ({e})") from e
    if len(raw) < len(MAGIC) + 12 + 4:
        raise ContainerError(f"{path}: file too short to be a container")
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    body, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ContainerError(f"{path}: checksum mismatch, file is corrupt")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {version} not supported (expected {FORMAT_VERSION})")
    off = len(MAGIC) + 12
    if off + hlen > len(body):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header ({e})") from e
    off += hlen

    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: unknown array dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dtype.itemsize
        if off + nbytes > len(body):
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(body):
        raise ContainerError(f"{path}: {len(body) - off} unexpected trailing payload bytes")
    return header.get("meta", {}), arrays
