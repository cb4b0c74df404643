"""Binary store of pre-extracted, mean-pooled image feature vectors.

File layout (little-endian): magic ``FSTR``, version u32 (=1), dim u32,
count u64, then per entry: key length u16, key bytes (UTF-8), dim float32.
The reserved key ``__placeholder__`` (the pooled black-image feature used
for text-only rows) must be present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FSTR"
VERSION = 1
PLACEHOLDER_KEY = "__placeholder__"

_HEADER = struct.Struct("<4sIIQ")
_KEYLEN = struct.Struct("<H")


class FeatureStoreError(Exception):
    pass


class FormatError(FeatureStoreError):
    pass


@dataclass
class FeatureStore:
    dim: int
    entries: dict[str, np.ndarray]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def write_store(entries: Mapping[str, np.ndarray], dim: int, path) -> None:
    """Write the store; entries are emitted in sorted key order."""
    if not entries:
        raise ValueError("refusing to write empty store: placeholder entry required")
    if PLACEHOLDER_KEY not in entries:
        raise ValueError(f"store must contain the reserved key {PLACEHOLDER_KEY!r}")
    seen = set()
    prepared = []
    for key in sorted(entries):
        if not key:
            raise ValueError("empty feature key")
        kb = key.encode("utf-8")
        if len(kb) > 255:
            raise ValueError(f"key {key!r} exceeds 255 UTF-8 bytes")
        if key in seen:
            raise ValueError(f"duplicate key {key!r}")
        seen.add(key)
        vec = np.asarray(entries[key], dtype=np.float32).reshape(-1)
        if vec.shape[0] != dim:
            raise ValueError(f"feature {key!r} has length {vec.shape[0]}, expected dim {dim}")
        if not np.isfinite(vec).all():
            raise ValueError(f"feature {key!r} contains non-finite values")
        prepared.append((kb, vec))
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, len(prepared)))
        for kb, vec in prepared:
            f.write(_KEYLEN.pack(len(kb)))
            f.write(kb)
            f.write(vec.tobytes())


def open_store(path) -> FeatureStore:
    """Load and validate a feature store file."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated store {path}: only {len(data)} header bytes")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}: not a feature store")
    if version != VERSION:
        raise FormatError(f"unsupported store version {version} in {path}")
    entries: dict[str, np.ndarray] = {}
    off = _HEADER.size
    vec_bytes = 4 * dim
    for _ in range(count):
        if off + _KEYLEN.size > len(data):
            raise FormatError(f"truncated store {path} at byte {off}: expected key length")
        (klen,) = _KEYLEN.unpack_from(data, off)
        off += _KEYLEN.size
        if off + klen + vec_bytes > len(data):
            raise FormatError(f"truncated store {path} at byte {off}: incomplete entry")
        key = data[off : off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += vec_bytes
        if key in entries:
            raise FormatError(f"duplicate key {key!r} in {path}")
        if not np.isfinite(vec).all():
            raise FormatError(f"non-finite values for key {key!r} in {path}")
        vec.flags.writeable = False
        entries[key] = vec
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after entry {count} in {path}")
    if PLACEHOLDER_KEY not in entries:
        raise FormatError(f"store {path} is missing the reserved key {PLACEHOLDER_KEY!r}")
    return FeatureStore(dim=int(dim), entries=entries)


def get_feature(store: FeatureStore, key: str) -> np.ndarray:
    try:
        return store.entries[key]
    except KeyError:
        raise KeyError(f"feature key {key!r} not present in store") from None
