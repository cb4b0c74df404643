"""Zero-shot benchmark harness.

Four task families: minimal pairs (grammatical vs ungrammatical sentence),
multiple-choice continuations, probability/human-rating correlation, and the
Winoground unpaired text score. Scoring is delegated to a Scorer object so
the harness is independent of the model; ties always count as incorrect and
no length normalization is applied anywhere (recorded in report metadata).

Text-only tasks condition on the placeholder image feature by default,
mirroring training-time conditioning; pass ``condition_on_placeholder=False``
to the ModelScorer to omit the image token instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from . import tokenizer as tok
from .features import PLACEHOLDER_KEY, FeatureStore, get_feature
from .model import ParameterSet, sequence_logprob


# ---------------------------------------------------------------------------
# task item types and file loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MinimalPairItem:
    sentence_good: str
    sentence_bad: str


@dataclass(frozen=True)
class ChoiceItem:
    prefix: str
    options: tuple[str, ...]
    answer_index: int


@dataclass(frozen=True)
class RatingItem:
    stimulus: str
    human_rating: float


@dataclass(frozen=True)
class WinogroundItem:
    caption_0: str
    caption_1: str
    image_key_0: str
    image_key_1: str


TASK_TYPES = ("minimal_pairs", "multiple_choice", "rating", "winoground")


def load_task_file(path, task_type: str) -> list:
    """Parse a JSONL task file into typed items, validating every record."""
    if task_type not in TASK_TYPES:
        raise ValueError(f"unknown task type {task_type!r}; expected one of {TASK_TYPES}")
    items = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{lineno}: malformed JSON line: {e}") from e
        try:
            items.append(_parse_item(obj, task_type))
        except (KeyError, ValueError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: {e}") from e
    return items


def _parse_item(obj: dict, task_type: str):
    if task_type == "minimal_pairs":
        good, bad = str(obj["sentence_good"]), str(obj["sentence_bad"])
        if not good.strip() or not bad.strip():
            raise ValueError("minimal pair sentences must be non-empty")
        return MinimalPairItem(good, bad)
    if task_type == "multiple_choice":
        options = tuple(str(o) for o in obj["options"])
        idx = int(obj["answer_index"])
        if len(options) < 2:
            raise ValueError("need at least 2 options")
        if not 0 <= idx < len(options):
            raise ValueError(f"answer_index {idx} out of range for {len(options)} options")
        return ChoiceItem(str(obj.get("prefix", "")), options, idx)
    if task_type == "rating":
        rating = float(obj["human_rating"])
        if not np.isfinite(rating):
            raise ValueError("human_rating must be finite")
        return RatingItem(str(obj["stimulus"]), rating)
    c0, c1 = str(obj["caption_0"]), str(obj["caption_1"])
    if c0 == c1:
        raise ValueError("winoground captions must be distinct")
    return WinogroundItem(c0, c1, str(obj["image_key_0"]), str(obj["image_key_1"]))


# ---------------------------------------------------------------------------
# scoring interface
# ---------------------------------------------------------------------------

class Scorer(Protocol):
    def score_text(self, text: str) -> float: ...

    def score_continuation(self, prefix: str, continuation: str) -> float: ...

    def score_caption(self, caption: str, image_key: str) -> float: ...


class EmptyEncodingError(ValueError):
    pass


class ModelScorer:
    """Scores text through a trained model, mirroring training conventions:
    sequences are [BOS, (IMG,) tokens..., EOS]; continuations are scored
    without EOS so only the option tokens contribute."""

    def __init__(
        self,
        params: ParameterSet,
        tokenizer: tok.TokenizerModel,
        store: Optional[FeatureStore] = None,
        condition_on_placeholder: bool = True,
        append_eos: bool = True,
    ):
        self.params = params
        self.tokenizer = tokenizer
        self.store = store
        self.condition_on_placeholder = condition_on_placeholder
        self.append_eos = append_eos
        self._zero_feat = np.zeros(params.config.feat_dim, dtype=params.dtype)

    def describe(self) -> dict:
        return {
            "length_normalization": "none",
            "condition_on_placeholder": self.condition_on_placeholder,
            "append_eos": self.append_eos,
        }

    def _placeholder(self):
        if self.store is not None:
            return get_feature(self.store, PLACEHOLDER_KEY)
        return self._zero_feat

    def _prefix_ids(self, with_image: bool) -> list[int]:
        t = self.tokenizer
        return [t.bos_id, t.img_id] if with_image else [t.bos_id]

    def score_text(self, text: str) -> float:
        t = self.tokenizer
        body = tok.encode(t, text)
        if not body:
            raise EmptyEncodingError(f"text encodes to nothing: {text!r}")
        with_img = self.condition_on_placeholder
        ids = self._prefix_ids(with_img) + body + ([t.eos_id] if self.append_eos else [])
        feat = self._placeholder() if with_img else None
        return sequence_logprob(self.params, ids, feat, start=2 if with_img else 1)

    def score_continuation(self, prefix: str, continuation: str) -> float:
        t = self.tokenizer
        cont = tok.encode(t, continuation)
        if not cont:
            raise EmptyEncodingError(f"option encodes to nothing: {continuation!r}")
        with_img = self.condition_on_placeholder
        ids = self._prefix_ids(with_img) + tok.encode(t, prefix) + cont
        feat = self._placeholder() if with_img else None
        return sequence_logprob(self.params, ids, feat, start=len(ids) - len(cont))

    def score_caption(self, caption: str, image_key: str) -> float:
        if self.store is None:
            raise ValueError("caption scoring requires a feature store")
        t = self.tokenizer
        body = tok.encode(t, caption)
        if not body:
            raise EmptyEncodingError(f"caption encodes to nothing: {caption!r}")
        ids = [t.bos_id, t.img_id] + body + ([t.eos_id] if self.append_eos else [])
        return sequence_logprob(self.params, ids, get_feature(self.store, image_key), start=2)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    n_items: int
    per_item: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    n_trials: Optional[int] = None

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "metric": self.metric,
            "value": self.value,
            "n_items": self.n_items,
            "metadata": self.metadata,
            "errors": self.errors,
            "per_item": self.per_item,
        }
        if self.n_trials is not None:
            d["n_trials"] = self.n_trials
        return d


def write_report(report: EvalReport, out_dir, stem: str) -> tuple[Path, Path]:
    """Emit <stem>.json (full report) and <stem>.csv (per-item decisions)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        if report.per_item:
            writer = csv.DictWriter(f, fieldnames=list(report.per_item[0]))
            writer.writeheader()
            writer.writerows(report.per_item)
    return json_path, csv_path


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def eval_minimal_pairs(scorer: Scorer, items: Sequence[MinimalPairItem]) -> EvalReport:
    """Accuracy of preferring the grammatical sentence; ties are incorrect."""
    if not items:
        raise ValueError("minimal-pair task is empty")
    per_item = []
    correct = 0
    for i, item in enumerate(items):
        sg = scorer.score_text(item.sentence_good)
        sb = scorer.score_text(item.sentence_bad)
        ok = sg > sb
        correct += ok
        per_item.append({"index": i, "score_good": sg, "score_bad": sb, "correct": int(ok)})
    meta = scorer.describe() if hasattr(scorer, "describe") else {}
    return EvalReport("minimal_pairs", "accuracy", correct / len(items), len(items),
                      per_item, metadata=meta)


def eval_multiple_choice(scorer: Scorer, items: Sequence[ChoiceItem]) -> EvalReport:
    """Accuracy of assigning the highest continuation probability to the
    correct option; argmax ties are incorrect. Items whose options cannot be
    encoded are excluded and reported."""
    if not items:
        raise ValueError("multiple-choice task is empty")
    per_item = []
    errors = []
    correct = 0
    n_valid = 0
    for i, item in enumerate(items):
        try:
            scores = [scorer.score_continuation(item.prefix, opt) for opt in item.options]
        except EmptyEncodingError as e:
            errors.append({"index": i, "error": str(e)})
            continue
        best = max(scores)
        tied = scores.count(best) > 1
        ok = (not tied) and scores.index(best) == item.answer_index
        correct += ok
        n_valid += 1
        per_item.append({
            "index": i, "scores": json.dumps(scores), "picked": scores.index(best),
            "answer": item.answer_index, "tie": int(tied), "correct": int(ok),
        })
    if n_valid == 0:
        raise ValueError("no scorable multiple-choice items")
    meta = scorer.describe() if hasattr(scorer, "describe") else {}
    return EvalReport("multiple_choice", "accuracy", correct / n_valid, n_valid,
                      per_item, errors, meta)


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties (Pearson over ranks)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be 1-D and the same length")
    if xs.shape[0] < 3:
        raise ValueError("need at least 3 points")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("correlation undefined for constant input")
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def eval_correlation(scorer: Scorer, items: Sequence[RatingItem]) -> EvalReport:
    """Spearman correlation between sentence log-probabilities and ratings."""
    if len(items) < 3:
        raise ValueError(f"need at least 3 rated stimuli, got {len(items)}")
    scores = [scorer.score_text(item.stimulus) for item in items]
    ratings = [item.human_rating for item in items]
    rho = spearman(scores, ratings)
    per_item = [
        {"index": i, "score": s, "human_rating": r}
        for i, (s, r) in enumerate(zip(scores, ratings))
    ]
    meta = scorer.describe() if hasattr(scorer, "describe") else {}
    return EvalReport("rating", "spearman_rho", rho, len(items), per_item, metadata=meta)


def eval_winoground(scorer: Scorer, items: Sequence[WinogroundItem],
                    store: FeatureStore) -> EvalReport:
    """Unpaired text score: each (image, caption pair) comparison is one
    trial, two per item; the correct caption must score strictly higher."""
    if not items:
        raise ValueError("winoground task is empty")
    per_item = []
    errors = []
    correct = 0
    n_valid = 0
    for i, item in enumerate(items):
        missing = [k for k in (item.image_key_0, item.image_key_1) if k not in store]
        if missing:
            errors.append({"index": i, "error": f"missing feature keys {missing}"})
            continue
        s00 = scorer.score_caption(item.caption_0, item.image_key_0)
        s10 = scorer.score_caption(item.caption_1, item.image_key_0)
        s01 = scorer.score_caption(item.caption_0, item.image_key_1)
        s11 = scorer.score_caption(item.caption_1, item.image_key_1)
        trial0 = s00 > s10
        trial1 = s11 > s01
        correct += int(trial0) + int(trial1)
        n_valid += 1
        per_item.append({
            "index": i, "c0_i0": s00, "c1_i0": s10, "c0_i1": s01, "c1_i1": s11,
            "trial_image_0": int(trial0), "trial_image_1": int(trial1),
        })
    if n_valid == 0:
        raise ValueError("no scorable winoground items")
    meta = scorer.describe() if hasattr(scorer, "describe") else {}
    return EvalReport("winoground", "unpaired_text_accuracy", correct / (2 * n_valid),
                      n_valid, per_item, errors, meta, n_trials=2 * n_valid)
