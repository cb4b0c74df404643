"""Inference-time weighted linear interpolation of two parameter sets.

out = alpha * llm + (1 - alpha) * vlm, elementwise, over every trainable
tensor (projector and embeddings included; both parents possess them).
Arithmetic runs in float64 and the result is clipped to the elementwise
[min, max] envelope of the parents, which makes the convexity bound and
idempotence on identical parents hold exactly despite rounding. Optimizer
state is never merged; merged checkpoints are inference-only.
"""

from __future__ import annotations

import shutil
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .model import ParameterSet


class IncompatibleModelsError(ValueError):
    pass


def validate_compatibility(
    a: ParameterSet,
    b: ParameterSet,
    meta_a: Optional[CheckpointMeta] = None,
    meta_b: Optional[CheckpointMeta] = None,
) -> None:
    """Tensor names, shapes, and (when metadata is given) tokenizer hashes
    must match exactly."""
    names_a, names_b = set(a.tensors), set(b.tensors)
    if names_a != names_b:
        missing = sorted(names_a ^ names_b)
        raise IncompatibleModelsError(f"tensor sets differ; first mismatch: {missing[0]}")
    for name in a.names():
        if a[name].shape != b[name].shape:
            raise IncompatibleModelsError(
                f"tensor {name} has shape {a[name].shape} vs {b[name].shape}"
            )
    if meta_a is not None and meta_b is not None:
        if meta_a.tokenizer_hash != meta_b.tokenizer_hash:
            raise IncompatibleModelsError(
                f"tokenizer hashes differ: {meta_a.tokenizer_hash[:12]} vs {meta_b.tokenizer_hash[:12]}"
            )


def merge(llm: ParameterSet, vlm: ParameterSet, alpha: float) -> ParameterSet:
    """alpha weights the language-only parent; 1 - alpha the multimodal one."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    validate_compatibility(llm, vlm)
    a64 = np.float64(alpha)
    b64 = np.float64(1.0) - a64
    out: dict[str, np.ndarray] = {}
    for name in llm.names():
        x = llm[name].astype(np.float64)
        y = vlm[name].astype(np.float64)
        merged = a64 * x + b64 * y
        np.clip(merged, np.minimum(x, y), np.maximum(x, y), out=merged)
        if not np.isfinite(merged).all():
            raise ValueError(f"non-finite values after merging tensor {name}")
        out[name] = merged.astype(llm[name].dtype)
    return ParameterSet(out, llm.config)


def merge_sweep(
    alphas: Sequence[float],
    llm_path,
    vlm_path,
    out_dir,
) -> list[Path]:
    """One merged checkpoint per alpha, named merged_a{alpha}. Partial outputs
    are removed if any merge fails."""
    if not alphas:
        raise ValueError("alpha list is empty")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {a}")
    names = [f"merged_a{a:g}" for a in alphas]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate merge output names in {names}")

    llm, meta_llm = load_checkpoint(llm_path)
    vlm, meta_vlm = load_checkpoint(vlm_path)
    validate_compatibility(llm, vlm, meta_llm, meta_vlm)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for a, name in zip(alphas, names):
            merged = merge(llm, vlm, a)
            meta = CheckpointMeta(
                words_seen=meta_vlm.words_seen,
                modality="merged",
                seed=meta_vlm.seed,
                tokenizer_hash=meta_vlm.tokenizer_hash,
                merge_info={
                    "alpha": float(a),
                    "parent_llm": _weights_sha(llm_path),
                    "parent_vlm": _weights_sha(vlm_path),
                },
            )
            target = out_dir / name
            save_checkpoint(merged, meta, target)
            written.append(target)
    except Exception:
        for path in written:
            shutil.rmtree(path, ignore_errors=True)
        raise
    return written


def _weights_sha(ckpt_path) -> str:
    import hashlib

    return hashlib.sha256((Path(ckpt_path) / "weights.bin").read_bytes()).hexdigest()
