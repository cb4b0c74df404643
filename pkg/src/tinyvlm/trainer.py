"""Cross-entropy training with AdamW, gradient accumulation, and the
word-budget checkpoint schedule.

The trainer owns the parameters exclusively while running. Gradients for an
accumulation group are averaged (not summed), so the loss scale does not
depend on accum_steps. Words seen are estimated from the running non-special
subword count via the corpus word-to-subword ratio; the schedule is checked
after every micro-batch so milestones cannot be skipped at large batch sizes.

All randomness comes from explicit seeds and reductions run in a fixed
order, so repeated runs match bit for bit in 64-bit mode (and to float
tolerance in 32-bit mode, where BLAS threading is the only variable).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Protocol

import numpy as np

from . import kernels
from .corpus import Batch
from .model import ModelConfig, ParameterSet, backward_batch, forward_batch, shape_manifest

# every 1M words up to 10M, every 10M up to 100M, every 100M up to 1B
SCHEDULE_THRESHOLDS: tuple[int, ...] = (
    tuple(range(1_000_000, 10_000_001, 1_000_000))
    + tuple(range(20_000_000, 100_000_001, 10_000_000))
    + tuple(range(200_000_000, 1_000_000_001, 100_000_000))
)

DEFAULT_WORD_RATIO = 1.36


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class NonFiniteGradient(ValueError):
    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter {param_name}")
        self.param_name = param_name


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    micro_batch: int = 64
    accum_steps: int = 8
    epochs: int = 10
    word_ratio: float = DEFAULT_WORD_RATIO
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if self.word_ratio <= 0:
            raise ValueError("word_ratio must be positive")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lr", "beta1", "beta2", "eps", "weight_decay", "micro_batch",
            "accum_steps", "epochs", "word_ratio", "seed")}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def zeros_like(params: ParameterSet) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(a) for k, a in params.tensors.items()},
            v={k: np.zeros_like(a) for k, a in params.tensors.items()},
            t=0,
        )


@dataclass
class ScheduleState:
    words_seen: int = 0
    subwords_seen: int = 0
    emitted: set[int] = field(default_factory=set)


class CheckpointSink(Protocol):
    def write_threshold(self, threshold: int, params: ParameterSet,
                        words_seen: int, opt: OptimizerState,
                        sched: "ScheduleState", step: int) -> None: ...

    def write_abort(self, params: ParameterSet, diagnostics: dict) -> None: ...


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits, targets, mask):
    """Mean over masked-in positions of -log softmax(logits)[target].

    Accepts [T, V] or [B, T, V]; accumulation happens in float64.
    """
    loss, _ = _xent(np.asarray(logits), np.asarray(targets), np.asarray(mask), want_grad=False)
    return loss


def _xent(logits, targets, mask, want_grad: bool):
    V = logits.shape[-1]
    flat = logits.reshape(-1, V).astype(np.float64)
    tgt = targets.reshape(-1)
    msk = mask.reshape(-1).astype(bool)
    if flat.shape[0] != tgt.shape[0] or tgt.shape[0] != msk.shape[0]:
        raise ValueError("logits, targets, and mask disagree in length")
    n = int(msk.sum())
    if n == 0:
        raise ValueError("all positions masked out; nothing to score")
    mx = flat.max(axis=1, keepdims=True)
    ex = np.exp(flat - mx)
    lse = np.log(ex.sum(axis=1)) + mx[:, 0]
    picked = flat[np.arange(flat.shape[0]), tgt]
    loss = float((lse[msk] - picked[msk]).sum() / n)
    if not want_grad:
        return loss, None
    dflat = ex / ex.sum(axis=1, keepdims=True)
    dflat[np.arange(flat.shape[0]), tgt] -= 1.0
    dflat *= (msk / n)[:, None]
    return loss, dflat.reshape(logits.shape)


def loss_and_grads(params: ParameterSet, token_ids, loss_mask, features=None):
    """Loss and parameter gradients for one batch of rows.

    Targets are the input shifted left; a position contributes iff its token
    is loss-masked in (i.e. not PAD/BOS/IMG).
    """
    logits, cache = forward_batch(params, token_ids, features, want_cache=True)
    ids = np.asarray(token_ids)
    shifted_targets = ids[:, 1:]
    shifted_mask = np.asarray(loss_mask)[:, 1:]
    loss, dl = _xent(logits[:, :-1, :], shifted_targets, shifted_mask, want_grad=True)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = dl.astype(params.dtype)
    grads = backward_batch(params, cache, dlogits)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_step(params: ParameterSet, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update; mutates params and state in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name in params.tensors:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)
        kernels.adamw_update(
            params.tensors[name].reshape(-1), g.reshape(-1),
            state.m[name].reshape(-1), state.v[name].reshape(-1),
            cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, bc1, bc2,
        )
    return params, state


# ---------------------------------------------------------------------------
# word accounting and checkpoint schedule
# ---------------------------------------------------------------------------

def estimate_words(subword_count: int, ratio: float) -> int:
    """floor(subwords / ratio), computed in exact decimal arithmetic so that
    e.g. 1360 subwords at ratio 1.36 give exactly 1000 words."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    return int(Fraction(int(subword_count)) / Fraction(str(ratio)))


def schedule_crossings(prev_words: int, new_words: int) -> list[int]:
    """All schedule thresholds tau with prev_words < tau <= new_words, ascending."""
    if prev_words > new_words:
        raise ValueError("word count must be monotone non-decreasing")
    return [t for t in SCHEDULE_THRESHOLDS if prev_words < t <= new_words]


def _batch_hash(batch: Batch) -> str:
    return hashlib.sha256(batch.token_ids.tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(
    params: ParameterSet,
    data: Iterable[Batch],
    cfg: TrainConfig,
    sink: Optional[CheckpointSink] = None,
    *,
    feature_lookup=None,
    special_ids: frozenset = frozenset(),
    opt: Optional[OptimizerState] = None,
    sched: Optional[ScheduleState] = None,
    start_step: int = 0,
    log_writer=None,
) -> ParameterSet:
    """Consume ``data``, stepping once per accum_steps micro-batches.

    ``feature_lookup`` maps an image key to its feature vector (a FeatureStore
    getter); when None, batches must be text-only. ``special_ids`` are the
    token ids excluded from the words-seen estimate. A trailing partial
    accumulation group still triggers a final (averaged) step.
    """
    opt = opt or OptimizerState.zeros_like(params)
    sched = sched or ScheduleState()
    step = start_step
    acc: dict[str, np.ndarray] | None = None
    acc_count = 0
    acc_loss = 0.0
    special_arr = np.array(sorted(special_ids), dtype=np.int64)
    # snapshot of the schedule at the last optimizer-step boundary; checkpoints
    # store it so a resumed run can replay a partial accumulation group exactly
    boundary = ScheduleState(sched.words_seen, sched.subwords_seen, set(sched.emitted))

    def _abort(reason: str, batch: Batch | None = None, param: str | None = None):
        diagnostics = {
            "step": step,
            "batch_hash": _batch_hash(batch) if batch is not None else None,
            "parameter": param,
            "reason": reason,
        }
        if sink is not None:
            sink.write_abort(params, diagnostics)
        raise TrainingAborted(f"training aborted at step {step}: {reason}", diagnostics)

    def flush_group(batch: Batch | None):
        nonlocal acc, acc_count, acc_loss, step, boundary
        if acc_count == 0:
            return
        for name in acc:
            acc[name] /= params.dtype.type(acc_count)
        try:
            adamw_step(params, acc, opt, cfg)
        except NonFiniteGradient as e:
            _abort(str(e), batch, e.param_name)
        step += 1
        boundary = ScheduleState(sched.words_seen, sched.subwords_seen, set(sched.emitted))
        if log_writer is not None:
            log_writer.writerow([step, sched.words_seen, f"{acc_loss / acc_count:.6f}", cfg.lr])
        acc = None
        acc_count = 0
        acc_loss = 0.0

    for batch in data:
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        feats = None
        if feature_lookup is not None:
            feats = np.stack([feature_lookup(k) for k in batch.image_keys]).astype(params.dtype)
        loss, grads = loss_and_grads(params, batch.token_ids, batch.loss_mask, feats)
        if not math.isfinite(loss):
            _abort(f"non-finite loss {loss}", batch)
        if acc is None:
            acc = grads
        else:
            for name in acc:
                acc[name] += grads[name]
        acc_count += 1
        acc_loss += loss

        if special_arr.size:
            subwords = int((~np.isin(batch.token_ids, special_arr)).sum())
        else:
            subwords = int(batch.token_ids.size)
        sched.subwords_seen += subwords
        new_words = estimate_words(sched.subwords_seen, cfg.word_ratio)
        for threshold in schedule_crossings(sched.words_seen, new_words):
            if threshold in sched.emitted:
                continue
            sched.emitted.add(threshold)
            if sink is not None:
                sink.write_threshold(threshold, params, new_words, opt, boundary, step)
        sched.words_seen = new_words

        if acc_count == cfg.accum_steps:
            flush_group(batch)
    flush_group(None)
    return params
