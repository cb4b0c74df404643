"""Bit-exact checkpoint serialization: manifest.json + weights.bin.

weights.bin is magic ``BLMC``, version u32 (=1), then raw little-endian
float32 row-major tensor data in manifest order, gap-free. manifest.json
lists name, dtype, shape, and absolute byte offset per tensor, plus the
model config, training metadata, and the SHA-256 of weights.bin. Tensors
are always stored as float32; 64-bit in-memory parameter sets are cast on
save. Checkpoints are immutable once written.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, ParameterSet, shape_manifest

MAGIC = b"BLMC"
VERSION = 1
_HEADER = struct.Struct("<4sI")

MODALITIES = ("text_only", "multimodal", "merged")


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class CheckpointMeta:
    words_seen: int
    modality: str
    seed: int
    tokenizer_hash: str
    merge_info: Optional[dict] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if not self.tokenizer_hash:
            raise ValueError("tokenizer_hash must be non-empty")
        if (self.modality == "merged") != (self.merge_info is not None):
            raise ValueError("merge_info must be present iff modality is 'merged'")

    def to_dict(self) -> dict:
        d = {
            "words_seen": self.words_seen,
            "modality": self.modality,
            "seed": self.seed,
            "tokenizer_hash": self.tokenizer_hash,
        }
        if self.merge_info is not None:
            d["merge_info"] = self.merge_info
        return d

    @staticmethod
    def from_dict(d: dict) -> "CheckpointMeta":
        return CheckpointMeta(
            words_seen=int(d["words_seen"]),
            modality=d["modality"],
            seed=int(d["seed"]),
            tokenizer_hash=d["tokenizer_hash"],
            merge_info=d.get("merge_info"),
        )


def save_checkpoint(params: ParameterSet, meta: CheckpointMeta, dir_path) -> None:
    """Write manifest.json and weights.bin; fsyncs and never leaves a partial
    manifest (temp file + atomic rename)."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    expected = shape_manifest(params.config)
    table = []
    offset = _HEADER.size
    blobs = []
    for name, shape in expected:
        t = params.tensors[name]
        if t.shape != shape:
            raise IntegrityError(f"tensor {name} has shape {t.shape}, manifest says {shape}")
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        table.append({"name": name, "dtype": "f32", "shape": list(shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    weights_path = out / "weights.bin"
    with open(weights_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION))
        for blob in blobs:
            f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    sha = hashlib.sha256(weights_path.read_bytes()).hexdigest()

    manifest = {
        "format_version": 1,
        "config": params.config.to_dict(),
        "meta": meta.to_dict(),
        "tensors": table,
        "weights_sha256": sha,
    }
    tmp = out / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, out / "manifest.json")


def load_checkpoint(dir_path) -> tuple[ParameterSet, CheckpointMeta]:
    """Load and validate a checkpoint directory."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{dir_path} is not a checkpoint: missing manifest.json") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest in {dir_path}: {e}") from e

    config = ModelConfig.from_dict(manifest["config"])
    meta = CheckpointMeta.from_dict(manifest["meta"])
    expected = shape_manifest(config)
    table = manifest["tensors"]
    if len(table) != len(expected):
        raise IntegrityError(
            f"{dir_path}: manifest lists {len(table)} tensors, config requires {len(expected)}"
        )
    offset = _HEADER.size
    for entry, (name, shape) in zip(table, expected):
        if entry["name"] != name:
            raise IntegrityError(f"{dir_path}: unexpected tensor {entry['name']!r}, wanted {name!r}")
        if tuple(entry["shape"]) != shape:
            raise IntegrityError(
                f"{dir_path}: tensor {name} has shape {tuple(entry['shape'])}, config requires {shape}"
            )
        if entry["dtype"] != "f32":
            raise FormatError(f"{dir_path}: tensor {name} has unsupported dtype {entry['dtype']!r}")
        if entry["offset"] != offset:
            raise IntegrityError(
                f"{dir_path}: tensor {name} at offset {entry['offset']}, expected {offset} (gap or overlap)"
            )
        offset += 4 * int(np.prod(shape))

    data = (dir_path / "weights.bin").read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{dir_path}: weights.bin truncated")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{dir_path}: bad magic {magic!r} in weights.bin")
    if version != VERSION:
        raise FormatError(f"{dir_path}: unsupported weights version {version}")
    if len(data) != offset:
        raise IntegrityError(
            f"{dir_path}: weights.bin is {len(data)} bytes, tensor table requires {offset}"
        )
    sha = hashlib.sha256(data).hexdigest()
    if sha != manifest["weights_sha256"]:
        raise IntegrityError(f"{dir_path}: weights.bin SHA-256 mismatch")

    tensors: dict[str, np.ndarray] = {}
    for entry, (name, shape) in zip(table, expected):
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=entry["offset"]).copy()
        tensors[name] = arr.reshape(shape)
    return ParameterSet(tensors, config), meta
