"""Command-line pipeline: tokenizer training, model training, merging,
evaluation over checkpoint series, and SVG report plotting.

Exit codes: 0 success, 2 usage/config error, 3 data/compatibility error.
Commands refuse to clobber existing outputs unless --overwrite is given.
The env var TINYVLM_SEED overrides any configured seed.
"""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import corpus, evals, merging as merge_mod, report as report_mod, tokenizer as tok
from .checkpoint import (
    CheckpointError,
    CheckpointMeta,
    load_checkpoint,
    save_checkpoint,
)
from .features import FeatureStoreError, get_feature, open_store
from .model import ModelConfig, ParameterSet, init_model, paper_config, shape_manifest
from .trainer import (
    OptimizerState,
    ScheduleState,
    TrainConfig,
    TrainingAborted,
    train,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------

MODEL_KEYS = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
              "max_len", "feat_dim", "img_token_id", "seed")
TRAIN_KEYS = ("lr", "beta1", "beta2", "eps", "weight_decay", "micro_batch",
              "accum_steps", "epochs", "word_ratio", "seed", "max_steps")


def load_config_file(path) -> tuple[dict, dict]:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}")
    model = dict(data.get("model", {}))
    trainc = dict(data.get("train", {}))
    for key in model:
        if key not in MODEL_KEYS:
            raise UsageError(f"unknown [model] key {key!r} in {path}")
    for key in trainc:
        if key not in TRAIN_KEYS:
            raise UsageError(f"unknown [train] key {key!r} in {path}")
    return model, trainc


def _seed_override(seed: int) -> int:
    env = os.environ.get("TINYVLM_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"TINYVLM_SEED must be an integer, got {env!r}")


def _check_clobber(path: Path, overwrite: bool, what: str) -> None:
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied and not overwrite:
        raise UsageError(f"{what} {path} already exists; pass --overwrite to replace it")


def _require_files(paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"file not found: {p}")


# ---------------------------------------------------------------------------
# train-tokenizer
# ---------------------------------------------------------------------------

def cmd_train_tokenizer(args) -> int:
    _require_files(args.corpus)
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise UsageError(f"tokenizer file {out} already exists; pass --overwrite to replace it")
    samples = corpus.load_text_corpus(args.corpus)
    texts = [s.text for s in samples]
    try:
        model = tok.train_bpe(texts, args.vocab_size)
    except ValueError as e:
        raise UsageError(str(e))
    tok.save(model, out)
    words = sum(corpus.count_words(t) for t in texts)
    subwords = sum(len(tok.encode(model, t)) for t in texts)
    ratio = tok.word_subword_ratio(words, subwords)
    print(f"trained tokenizer: {model.vocab_size} tokens, {len(model.merges)} merges -> {out}")
    print(f"words: {words}  subwords: {subwords}  word-to-subword ratio: {ratio:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

class DirectorySink:
    """Writes schedule checkpoints as <out>/ckpt_<threshold> plus the resume
    state (optimizer moments and schedule position at the last optimizer-step
    boundary)."""

    def __init__(self, out_dir: Path, modality: str, seed: int, tokenizer_hash: str):
        self.out_dir = Path(out_dir)
        self.modality = modality
        self.seed = seed
        self.tokenizer_hash = tokenizer_hash

    def _meta(self, words_seen: int) -> CheckpointMeta:
        return CheckpointMeta(words_seen=words_seen, modality=self.modality,
                              seed=self.seed, tokenizer_hash=self.tokenizer_hash)

    def _write(self, name: str, params, words_seen, opt, sched, step) -> Path:
        target = self.out_dir / name
        save_checkpoint(params, self._meta(words_seen), target)
        np.savez(
            target / "optim.npz",
            t=np.int64(opt.t),
            **{f"m::{k}": v for k, v in opt.m.items()},
            **{f"v::{k}": v for k, v in opt.v.items()},
        )
        state = {
            "step": step,
            "words_seen": sched.words_seen,
            "subwords_seen": sched.subwords_seen,
            "emitted": sorted(sched.emitted),
        }
        (target / "train_state.json").write_text(json.dumps(state), encoding="utf-8")
        return target

    def write_threshold(self, threshold, params, words_seen, opt, sched, step):
        path = self._write(f"ckpt_{threshold}", params, words_seen, opt, sched, step)
        print(f"checkpoint at {threshold} words -> {path}")

    def write_final(self, params, words_seen, opt, sched, step):
        path = self._write("ckpt_final", params, words_seen, opt, sched, step)
        print(f"final checkpoint -> {path}")

    def write_abort(self, params, diagnostics):
        target = self.out_dir / "ckpt_abort_last_good"
        save_checkpoint(params, self._meta(diagnostics.get("words_seen", 0) or 0), target)
        (target / "diagnostics.json").write_text(json.dumps(diagnostics, indent=1), encoding="utf-8")
        print(f"aborted; last-good checkpoint -> {target}", file=sys.stderr)


def _load_resume(ckpt_dir: Path, params: ParameterSet):
    opt_path = ckpt_dir / "optim.npz"
    state_path = ckpt_dir / "train_state.json"
    if not opt_path.exists() or not state_path.exists():
        raise UsageError(f"{ckpt_dir} has no resume state (optim.npz / train_state.json)")
    with np.load(opt_path) as z:
        opt = OptimizerState(
            m={k[3:]: z[k].copy() for k in z.files if k.startswith("m::")},
            v={k[3:]: z[k].copy() for k in z.files if k.startswith("v::")},
            t=int(z["t"]),
        )
    state = json.loads(state_path.read_text(encoding="utf-8"))
    sched = ScheduleState(
        words_seen=int(state["words_seen"]),
        subwords_seen=int(state["subwords_seen"]),
        emitted=set(state["emitted"]),
    )
    return opt, sched, int(state["step"])


def cmd_train(args) -> int:
    model_kv, train_kv = load_config_file(args.config)
    _require_files(args.text + (args.captions or []))
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not (args.overwrite or args.resume_from):
        raise UsageError(f"output dir {out_dir} is not empty; pass --overwrite")

    tokenizer = tok.load(args.tokenizer)
    tok_hash = tok.model_hash(tokenizer)

    model_kv.setdefault("vocab_size", tokenizer.vocab_size)
    model_kv.setdefault("img_token_id", tokenizer.img_id)
    if model_kv["vocab_size"] != tokenizer.vocab_size:
        raise UsageError(
            f"config vocab_size {model_kv['vocab_size']} != tokenizer vocab {tokenizer.vocab_size}"
        )
    try:
        mcfg = ModelConfig(**{**model_kv, "seed": _seed_override(int(model_kv.get("seed", 0)))})
        tcfg = TrainConfig(**{**train_kv, "seed": _seed_override(int(train_kv.get("seed", 0)))})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}")

    samples: list = list(corpus.load_text_corpus(args.text))
    store = None
    feature_lookup = None
    if args.captions:
        if not args.features:
            raise UsageError("--captions requires --features <store>")
        store = open_store(args.features)
        if store.dim != mcfg.feat_dim:
            raise DataError(f"feature store dim {store.dim} != config feat_dim {mcfg.feat_dim}")
        samples += corpus.load_caption_corpus(args.captions, store)
        feature_lookup = lambda key: get_feature(store, key)  # noqa: E731
    if not samples:
        raise UsageError("no training samples")
    modality = "multimodal" if args.captions else "text_only"

    if args.resume_from:
        params, meta = load_checkpoint(args.resume_from)
        if meta.tokenizer_hash != tok_hash:
            raise DataError("resume checkpoint was trained with a different tokenizer")
        opt, sched, start_step = _load_resume(Path(args.resume_from), params)
        skip = start_step * tcfg.accum_steps
    else:
        params = init_model(mcfg)
        opt = OptimizerState.zeros_like(params)
        sched = ScheduleState()
        start_step, skip = 0, 0

    out_dir.mkdir(parents=True, exist_ok=True)
    sink = DirectorySink(out_dir, modality, mcfg.seed, tok_hash)
    stream = corpus.epoch_stream(samples, tokenizer, tcfg.micro_batch, mcfg.max_len,
                                 tcfg.seed, tcfg.epochs)
    if skip:
        stream = itertools.islice(stream, skip, None)
    if args.prefetch:
        stream = corpus.prefetched(stream, args.prefetch)

    log_path = out_dir / "train_log.csv"
    new_log = not log_path.exists() or not args.resume_from
    with open(log_path, "w" if new_log else "a", newline="", encoding="utf-8") as logf:
        writer = csv.writer(logf)
        if new_log:
            writer.writerow(["step", "words_seen", "loss", "lr"])
        try:
            params = train(
                params, stream, tcfg, sink,
                feature_lookup=feature_lookup,
                special_ids=tokenizer.special_ids,
                opt=opt, sched=sched, start_step=start_step,
                log_writer=writer,
            )
        except TrainingAborted as e:
            print(f"error: {e}", file=sys.stderr)
            return 3
    sink.write_final(params, sched.words_seen, opt, sched, opt.t)
    return 0


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

def cmd_merge(args) -> int:
    try:
        alphas = [float(a) for a in args.alpha.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --alpha {args.alpha!r}")
    if not alphas:
        raise UsageError("no alpha values given")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise UsageError(f"alpha {a} outside [0, 1]")
    if len({f"merged_a{a:g}" for a in alphas}) != len(alphas):
        raise UsageError(f"duplicate alpha values in {alphas}")
    out_dir = Path(args.out)
    for a in alphas:
        _check_clobber(out_dir / f"merged_a{a:g}", args.overwrite, "merged checkpoint")
    paths = merge_mod.merge_sweep(alphas, args.llm, args.vlm, out_dir)
    for p in paths:
        print(p)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _checkpoint_list(args) -> list[Path]:
    if args.ckpt:
        return [Path(args.ckpt)]
    found = sorted(globmod.glob(args.ckpt_glob))
    dirs = [Path(p) for p in found if (Path(p) / "manifest.json").exists()]
    if not dirs:
        raise UsageError(f"no checkpoints match {args.ckpt_glob!r}")
    return dirs


def cmd_eval(args) -> int:
    _require_files([args.task, args.tokenizer])
    tokenizer = tok.load(args.tokenizer)
    tok_hash = tok.model_hash(tokenizer)
    items = evals.load_task_file(args.task, args.task_type)
    store = None
    if args.features:
        store = open_store(args.features)
    if args.task_type == "winoground" and store is None:
        raise UsageError("winoground evaluation requires --features")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ckpt_dir in _checkpoint_list(args):
        params, meta = load_checkpoint(ckpt_dir)
        if meta.tokenizer_hash != tok_hash:
            raise DataError(f"{ckpt_dir}: checkpoint tokenizer hash does not match --tokenizer")
        scorer = evals.ModelScorer(
            params, tokenizer, store,
            condition_on_placeholder=not args.no_placeholder,
            append_eos=not args.no_eos,
        )
        if args.task_type == "minimal_pairs":
            rep = evals.eval_minimal_pairs(scorer, items)
        elif args.task_type == "multiple_choice":
            rep = evals.eval_multiple_choice(scorer, items)
        elif args.task_type == "rating":
            rep = evals.eval_correlation(scorer, items)
        else:
            rep = evals.eval_winoground(scorer, items, store)
        rep.metadata["checkpoint"] = str(ckpt_dir)
        rep.metadata["words_seen"] = meta.words_seen
        rep.metadata["modality"] = meta.modality
        stem = f"{ckpt_dir.name}_{args.task_type}"
        _check_clobber(out_dir / f"{stem}.json", args.overwrite, "report")
        evals.write_report(rep, out_dir, stem)
        rows.append((meta.words_seen, str(ckpt_dir), rep.metric, rep.value))
        print(f"{ckpt_dir}: {rep.metric} = {rep.value:.4f} (n={rep.n_items})")

    rows.sort(key=lambda r: r[0])
    curve_path = out_dir / f"curve_{args.task_type}.csv"
    with open(curve_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["words_seen", "checkpoint", "metric", "value"])
        writer.writerows(rows)
    print(f"curve -> {curve_path}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_curve(path: Path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "words_seen" not in reader.fieldnames \
                or "value" not in reader.fieldnames:
            raise UsageError(f"{path}: not a curve CSV (need words_seen,value columns)")
        xs, ys, metric = [], [], "metric"
        for row in reader:
            xs.append(float(row["words_seen"]))
            ys.append(float(row["value"]))
            metric = row.get("metric", metric) or metric
    if not xs:
        raise UsageError(f"{path}: curve CSV has no data rows")
    return xs, ys, metric


def cmd_report(args) -> int:
    _require_files(args.curves)
    out = Path(args.out)
    _check_clobber(out, args.overwrite, "plot")
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.curves):
        raise UsageError(f"{len(labels)} labels for {len(args.curves)} curves")
    series = []
    ylabel = "metric"
    for i, path in enumerate(args.curves):
        xs, ys, metric = _read_curve(Path(path))
        ylabel = metric
        label = labels[i] if labels else Path(path).stem
        series.append((label, xs, ys))
    report_mod.write_curve_plot(series, out, title=args.title, ylabel=ylabel)
    print(f"plot -> {out}")
    return 0


# ---------------------------------------------------------------------------
# describe
# ---------------------------------------------------------------------------

def cmd_describe(args) -> int:
    if args.ckpt:
        params, _ = load_checkpoint(args.ckpt)
        cfg = params.config
    elif args.config:
        model_kv, _ = load_config_file(args.config)
        try:
            cfg = ModelConfig(**model_kv)
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config: {e}")
    else:
        cfg = paper_config()
    manifest = {name: list(shape) for name, shape in shape_manifest(cfg)}
    text = json.dumps({"config": cfg.to_dict(), "tensors": manifest}, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# parser / entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyvlm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-tokenizer", help="train a BPE tokenizer from corpus files")
    t.add_argument("--corpus", nargs="+", required=True)
    t.add_argument("--vocab-size", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train_tokenizer)

    tr = sub.add_parser("train", help="train a model and emit scheduled checkpoints")
    tr.add_argument("--config", required=True, help="TOML file with [model] and [train] tables")
    tr.add_argument("--tokenizer", required=True)
    tr.add_argument("--text", nargs="+", required=True)
    tr.add_argument("--captions", nargs="*", default=None)
    tr.add_argument("--features", default=None, help="feature store for caption data")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume-from", default=None)
    tr.add_argument("--prefetch", type=int, default=0)
    tr.add_argument("--overwrite", action="store_true")
    tr.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="linearly interpolate two checkpoints")
    m.add_argument("--llm", required=True)
    m.add_argument("--vlm", required=True)
    m.add_argument("--alpha", required=True, help="comma list, e.g. 0.3,0.5,0.8")
    m.add_argument("--out", required=True)
    m.add_argument("--overwrite", action="store_true")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="run a benchmark over one or many checkpoints")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--ckpt-glob")
    e.add_argument("--task", required=True)
    e.add_argument("--task-type", required=True, choices=evals.TASK_TYPES)
    e.add_argument("--tokenizer", required=True)
    e.add_argument("--features", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--no-placeholder", action="store_true",
                   help="omit the image token for text-only tasks")
    e.add_argument("--no-eos", action="store_true")
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="plot metric curves against words seen")
    r.add_argument("--curves", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--labels", default=None, help="comma list, one per curve")
    r.add_argument("--title", default="")
    r.add_argument("--overwrite", action="store_true")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("describe", help="dump the parameter shape manifest as JSON")
    d.add_argument("--config", default=None)
    d.add_argument("--ckpt", default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args) or 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FeatureStoreError,
            merge_mod.IncompatibleModelsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
