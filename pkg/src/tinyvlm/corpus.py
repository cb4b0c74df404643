"""Corpus ingestion, deterministic splitting, word counting, and batching.

Text corpora are JSONL files with a ``text`` field (``.jsonl``/``.json``
extension) or plain UTF-8 text with one sample per line; caption manifests
are JSONL with ``caption`` and ``image_key`` fields. Batch rows are
fixed-length: captions as [BOS, IMG, tokens..., EOS, PAD...], text as
[BOS, tokens..., EOS, PAD...], truncated from the right so the BOS/IMG
prefix always survives.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from . import tokenizer as tok
from .features import PLACEHOLDER_KEY


@dataclass(frozen=True)
class TextSample:
    text: str


@dataclass(frozen=True)
class CaptionSample:
    caption: str
    image_key: str


Sample = Union[TextSample, CaptionSample]


@dataclass
class Batch:
    token_ids: np.ndarray  # int64 [batch, max_len]
    loss_mask: np.ndarray  # bool [batch, max_len]
    image_keys: list[str]  # one per row; placeholder key for text-only rows
    word_count: int  # whitespace words present in the rows, specials excluded


@dataclass
class BatchStats:
    skipped_empty: int = 0


def _read_lines(path: Path) -> list[str]:
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read corpus file {path}: {e}") from e
    return raw.splitlines()


def load_text_corpus(paths: Sequence) -> list[TextSample]:
    """One sample per non-blank line, kept in file order."""
    samples: list[TextSample] = []
    for p in paths:
        path = Path(p)
        jsonl = path.suffix in (".jsonl", ".json")
        for lineno, line in enumerate(_read_lines(path), start=1):
            if not line.strip():
                continue
            if jsonl:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: malformed JSON line: {e}") from e
                if not isinstance(obj, dict) or "text" not in obj:
                    raise ValueError(f"{path}:{lineno}: expected an object with a 'text' field")
                text = str(obj["text"])
            else:
                text = line
            if text.strip():
                samples.append(TextSample(text))
    return samples


def load_caption_corpus(paths: Sequence, store=None) -> list[CaptionSample]:
    """JSONL caption manifests; keys are checked against ``store`` when given."""
    samples: list[CaptionSample] = []
    for p in paths:
        path = Path(p)
        for lineno, line in enumerate(_read_lines(path), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {e}") from e
            if not isinstance(obj, dict) or "caption" not in obj or "image_key" not in obj:
                raise ValueError(f"{path}:{lineno}: expected 'caption' and 'image_key' fields")
            caption = str(obj["caption"])
            key = str(obj["image_key"])
            if not caption.strip():
                raise ValueError(f"{path}:{lineno}: empty caption")
            if store is not None and key not in store.entries:
                raise ValueError(f"{path}:{lineno}: image_key {key!r} not present in feature store")
            samples.append(CaptionSample(caption, key))
    return samples


def count_words(text: str) -> int:
    """Number of maximal non-whitespace runs."""
    return len(text.split())


def split_train_val(samples: list, train_fraction: float, seed: int):
    """Deterministic shuffled split; floor(fraction * N) samples go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(samples)
    if n < 2:
        raise ValueError(f"cannot split {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    return train, val


def _encode_row(t: tok.TokenizerModel, sample: Sample, max_len: int):
    if isinstance(sample, CaptionSample):
        body = tok.encode(t, sample.caption)
        prefix = [t.bos_id, t.img_id]
        key = sample.image_key
    else:
        body = tok.encode(t, sample.text)
        prefix = [t.bos_id]
        key = PLACEHOLDER_KEY
    if not body:
        return None
    full = prefix + body + [t.eos_id]
    row = full[:max_len]
    row = row + [t.pad_id] * (max_len - len(row))
    no_loss = (t.pad_id, t.bos_id, t.img_id)
    mask = [i not in no_loss for i in row]
    words = count_words(tok.decode(t, row))
    return row, mask, key, words


def make_batches(
    samples: list,
    tokenizer: tok.TokenizerModel,
    batch_size: int,
    max_len: int,
    seed: int,
    stats: BatchStats | None = None,
) -> Iterator[Batch]:
    """Yield one epoch of fixed-shape batches, shuffled deterministically.

    Samples whose encoding is empty are skipped and counted in ``stats``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    order = np.random.default_rng(seed).permutation(len(samples))
    rows: list = []
    for idx in order:
        encoded = _encode_row(tokenizer, samples[int(idx)], max_len)
        if encoded is None:
            if stats is not None:
                stats.skipped_empty += 1
            continue
        rows.append(encoded)
        if len(rows) == batch_size:
            yield _assemble(rows)
            rows = []
    if rows:
        yield _assemble(rows)


def _assemble(rows) -> Batch:
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    mask = np.array([r[1] for r in rows], dtype=bool)
    keys = [r[2] for r in rows]
    words = int(sum(r[3] for r in rows))
    return Batch(token_ids=ids, loss_mask=mask, image_keys=keys, word_count=words)


def epoch_stream(
    samples: list,
    tokenizer: tok.TokenizerModel,
    batch_size: int,
    max_len: int,
    base_seed: int,
    epochs: int,
    start_epoch: int = 0,
    skip_batches: int = 0,
    stats: BatchStats | None = None,
) -> Iterator[Batch]:
    """Concatenate epochs; epoch e reshuffles under seed base_seed + e."""
    for epoch in range(start_epoch, epochs):
        it = make_batches(samples, tokenizer, batch_size, max_len, base_seed + epoch, stats)
        if epoch == start_epoch and skip_batches:
            for _ in range(skip_batches):
                next(it, None)
        yield from it


_STOP = object()


def prefetched(batches: Iterable[Batch], depth: int = 2) -> Iterator[Batch]:
    """Producer-thread prefetch; batch content and order are unchanged.

    All shuffling already happened under explicit seeds upstream, so any
    prefetch depth yields the identical sequence. One producer, one consumer.
    """
    if depth < 1:
        yield from batches
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    err: list[BaseException] = []

    def run():
        try:
            for b in batches:
                q.put(b)
        except BaseException as e:  # propagate into the consumer
            err.append(e)
        finally:
            q.put(_STOP)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is _STOP:
            break
        yield item
    t.join()
    if err:
        raise err[0]
