"""Byte-pair-encoding tokenizer trained from scratch on the corpus.

Pre-tokenization splits on whitespace and at Unicode punctuation boundaries
(each punctuation mark becomes its own unit). Merges are learned greedily on
the highest-frequency adjacent pair; frequency ties break lexicographically
on the (left, right) string pair, so training is fully deterministic. A word
boundary marker symbol closes every unit, which lets decode restore spaces.

No normalization (lowercasing, accent stripping) is applied.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels

END_MARK = "</w>"

SPECIAL_ROLES = ("PAD", "BOS", "EOS", "UNK", "IMG")
DEFAULT_SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "<image>")


@dataclass
class TokenizerModel:
    """Trained BPE model: vocab (index = id), ordered merges, special ids."""

    vocab: list[str]
    merges: list[tuple[str, str]]
    specials: dict[str, int]
    token_to_id: dict[str, int] = field(repr=False, default_factory=dict)
    merge_ranks: dict[tuple[str, str], int] = field(repr=False, default_factory=dict)
    _unit_cache: dict[str, list[int]] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        if not self.merge_ranks:
            self.merge_ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.specials["PAD"]

    @property
    def bos_id(self) -> int:
        return self.specials["BOS"]

    @property
    def eos_id(self) -> int:
        return self.specials["EOS"]

    @property
    def unk_id(self) -> int:
        return self.specials["UNK"]

    @property
    def img_id(self) -> int:
        return self.specials["IMG"]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.specials.values())


def pre_tokenize(text: str) -> list[str]:
    """Split into units at whitespace; punctuation chars become their own units."""
    units: list[str] = []
    for chunk in text.split():
        cur: list[str] = []
        for ch in chunk:
            if unicodedata.category(ch).startswith("P"):
                if cur:
                    units.append("".join(cur))
                    cur = []
                units.append(ch)
            else:
                cur.append(ch)
        if cur:
            units.append("".join(cur))
    return units


def train_bpe(
    corpus: Iterable[str],
    vocab_size: int,
    specials: Sequence[str] = DEFAULT_SPECIALS,
) -> TokenizerModel:
    """Learn a BPE vocabulary of exactly ``vocab_size`` tokens (specials included).

    Stops early only if the corpus runs out of mergeable pairs, in which case
    the vocabulary is smaller than requested.
    """
    if len(specials) != len(SPECIAL_ROLES):
        raise ValueError(f"expected {len(SPECIAL_ROLES)} special tokens, got {len(specials)}")
    if len(set(specials)) != len(specials):
        raise ValueError("special tokens must be distinct")

    unit_counts: Counter[str] = Counter()
    for text in corpus:
        unit_counts.update(pre_tokenize(text))
    if not unit_counts:
        raise ValueError("cannot train tokenizer: corpus is empty")

    alphabet = sorted({ch for unit in unit_counts for ch in unit} | {END_MARK})
    base = len(specials) + len(alphabet)
    if vocab_size <= base:
        raise ValueError(
            f"vocab_size {vocab_size} too small: need > {base} "
            f"({len(specials)} specials + {len(alphabet)} base symbols)"
        )
    n_merges = vocab_size - base

    syms: list[str] = list(alphabet)
    sym_id = {s: i for i, s in enumerate(syms)}
    units = sorted(unit_counts)  # fixed order keeps pair counting reproducible
    width = max(len(u) for u in units) + 1
    words = np.full((len(units), width), -1, dtype=np.int32)
    lengths = np.empty(len(units), dtype=np.int32)
    counts = np.empty(len(units), dtype=np.int64)
    for w, unit in enumerate(units):
        for i, ch in enumerate(unit):
            words[w, i] = sym_id[ch]
        words[w, len(unit)] = sym_id[END_MARK]
        lengths[w] = len(unit) + 1
        counts[w] = unit_counts[unit]

    merges: list[tuple[str, str]] = []
    capacity = len(syms) + n_merges  # exceeds every symbol id ever assigned
    for _ in range(n_merges):
        codes, sums = kernels.pair_counts(words, lengths, counts, capacity)
        if codes.size == 0:
            break
        best = sums.max()
        candidates = codes[sums == best]
        pairs = [(syms[int(c) // capacity], syms[int(c) % capacity]) for c in candidates]
        left_s, right_s = min(pairs)
        merged = left_s + right_s
        new_id = len(syms)
        syms.append(merged)
        merges.append((left_s, right_s))
        kernels.apply_merge(words, lengths, sym_id[left_s], sym_id[right_s], new_id)
        sym_id[merged] = new_id

    vocab = list(specials) + syms
    special_map = {role: i for i, role in enumerate(SPECIAL_ROLES)}
    return TokenizerModel(vocab=vocab, merges=merges, specials=special_map)


def _encode_unit(t: TokenizerModel, unit: str) -> list[int]:
    cached = t._unit_cache.get(unit)
    if cached is not None:
        return cached
    symbols = list(unit) + [END_MARK]
    ranks = t.merge_ranks
    while len(symbols) > 1:
        best_rank = None
        best_i = -1
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_i = i
        if best_rank is None:
            break
        symbols[best_i : best_i + 2] = [symbols[best_i] + symbols[best_i + 1]]
    special_ids = t.special_ids
    unk = t.unk_id
    ids = []
    for s in symbols:
        i = t.token_to_id.get(s, unk)
        # raw text must never produce a special id
        ids.append(unk if i in special_ids else i)
    t._unit_cache[unit] = ids
    return ids


def encode(t: TokenizerModel, text: str) -> list[int]:
    """Deterministic encoding; characters unseen at training time become UNK."""
    ids: list[int] = []
    for unit in pre_tokenize(text):
        ids.extend(_encode_unit(t, unit))
    return ids


def decode(t: TokenizerModel, ids: Sequence[int]) -> str:
    """Inverse of encode up to whitespace normalization; specials render empty."""
    pieces = []
    special_ids = t.special_ids
    for i in ids:
        idx = int(i)
        if idx < 0 or idx >= len(t.vocab):
            raise ValueError(f"token id {idx} out of range (vocab size {len(t.vocab)})")
        if idx in special_ids:
            continue
        pieces.append(t.vocab[idx])
    return "".join(pieces).replace(END_MARK, " ").strip()


def word_subword_ratio(words: int, subwords: int) -> float:
    """Subwords per whitespace word, the words-seen estimation constant."""
    if words <= 0:
        raise ValueError("word count must be positive")
    return subwords / words


def to_json(t: TokenizerModel) -> str:
    payload = {
        "vocab": t.vocab,
        "merges": [f"{l} {r}" for l, r in t.merges],
        "specials": dict(t.specials),
    }
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def from_json(payload: str) -> TokenizerModel:
    data = json.loads(payload)
    merges = []
    for rule in data["merges"]:
        left, sep, right = rule.partition(" ")
        if not sep:
            raise ValueError(f"malformed merge rule {rule!r}")
        merges.append((left, right))
    return TokenizerModel(vocab=list(data["vocab"]), merges=merges, specials=dict(data["specials"]))


def save(t: TokenizerModel, path) -> None:
    Path(path).write_text(to_json(t), encoding="utf-8")


def load(path) -> TokenizerModel:
    return from_json(Path(path).read_text(encoding="utf-8"))


def model_hash(t: TokenizerModel) -> str:
    """SHA-256 of the canonical serialization, recorded in checkpoint metadata."""
    return hashlib.sha256(to_json(t).encode("utf-8")).hexdigest()
