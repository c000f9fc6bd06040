"""Command-line entry point: ``paravae train|generate|evaluate|curve``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 training
divergence.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .corpus import build_vocab, decode, detokenize, encode, encode_pair, load_pairs, tokenize
from .errors import (
    CheckpointError,
    DataFormatError,
    EmptySequenceError,
    PosteriorUnavailableError,
    TrainingDivergedError,
)
from .generator import DECODE_MODES, Z_MODES, GenerationRequest, sample_paraphrases
from .model import ModelConfig, ParaphraseVaeParams
from .trainer import TrainConfig, evaluate, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

CONFIG_SECTIONS = ("model", "train", "generate", "vocab")
GENERATE_KEYS = ("num_samples", "decode_mode", "beam_size", "max_decode_length", "seed", "z_mode")
VOCAB_KEYS = ("min_count", "max_size")

log = logging.getLogger("paravae")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def load_config(path) -> dict:
    """Read a JSON config with optional sections model/train/generate/vocab."""
    if path is None:
        return {s: {} for s in CONFIG_SECTIONS}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = {s: dict(raw.get(s) or {}) for s in CONFIG_SECTIONS}
    if "vocab_size" in cfg["model"]:
        raise UsageError("model.vocab_size is derived from the data; remove it")
    model_keys = set(ModelConfig.__dataclass_fields__) - {"vocab_size"}
    known = {"model": model_keys, "train": set(TrainConfig.__dataclass_fields__),
             "generate": set(GENERATE_KEYS), "vocab": set(VOCAB_KEYS)}
    for section, keys in known.items():
        extra = set(cfg[section]) - keys
        if extra:
            raise UsageError(f"{path}: unknown keys in {section}: {sorted(extra)}")
    return cfg


def _build_parser():
    p = argparse.ArgumentParser(prog="paravae", description="Conditional VAE paraphrase toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on sentence pairs")
    t.add_argument("--data", required=True)
    t.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log-file")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=("vae-svg", "vae-svg-eq", "vae-s", "unsupervised"))
    t.add_argument("--iterations", type=int, help="overrides train.total_iterations")

    g = sub.add_parser("generate", help="sample paraphrases for input sentences")
    g.add_argument("--model", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--num-samples", type=int)
    mode = g.add_mutually_exclusive_group()
    mode.add_argument("--beam", type=int, metavar="K")
    mode.add_argument("--greedy", action="store_true")
    g.add_argument("--seed", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--z-mode", choices=Z_MODES)

    e = sub.add_parser("evaluate", help="avg/best BLEU, METEOR and TER of generated variants")
    e.add_argument("--generated", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--detail")

    c = sub.add_parser("curve", help="recall vs. quality under confidence filtering")
    c.add_argument("--generated", required=True)
    c.add_argument("--references", required=True)
    c.add_argument("--confidence", choices=metrics.METRICS, default="bleu")
    c.add_argument("--thresholds", default="auto")
    c.add_argument("--out", required=True)
    return p


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    pairs_raw = load_pairs(args.data, args.format)
    if not pairs_raw:
        raise DataError(f"{args.data}: no sentence pairs")
    model_kw = dict(cfg["model"])
    if args.variant:
        model_kw["variant"] = args.variant
    train_kw = dict(cfg["train"])
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.iterations is not None:
        train_kw["total_iterations"] = args.iterations
    if "total_iterations" not in train_kw:
        raise UsageError("total iterations required (train.total_iterations or --iterations)")
    vocab = build_vocab(pairs_raw, **cfg["vocab"])
    try:
        mcfg = ModelConfig(vocab_size=len(vocab), **model_kw)
        tcfg = TrainConfig.from_dict(train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    pairs = [encode_pair(vocab, p, mcfg.max_length) for p in pairs_raw]
    params = ParaphraseVaeParams.init(mcfg, seed=tcfg.seed)
    ckpt, _ = train(params, tcfg, pairs, vocab, log_file=args.log_file, checkpoint_path=args.out)
    nll, kl = evaluate(ckpt.params, pairs)
    print(json.dumps({"nll": round(nll, 6), "kl": round(kl, 6),
                      "iterations": ckpt.iteration, "pairs": len(pairs)}))
    return EXIT_OK


def _request_kwargs(cfg, args):
    kw = dict(cfg["generate"])
    if args.num_samples is not None:
        kw["num_samples"] = args.num_samples
    if args.beam is not None:
        kw["decode_mode"], kw["beam_size"] = "beam", args.beam
    elif args.greedy:
        kw["decode_mode"] = "greedy"
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.max_len is not None:
        kw["max_decode_length"] = args.max_len
    if args.z_mode is not None:
        kw["z_mode"] = args.z_mode
    if kw.get("decode_mode", "greedy") not in DECODE_MODES:
        raise UsageError(f"decode_mode must be one of {DECODE_MODES}")
    return kw


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    kw = _request_kwargs(cfg, args)
    base_seed = kw.pop("seed", 0)
    ckpt = load_checkpoint(args.model)
    if ckpt.vocab is None:
        raise DataError(f"{args.model}: checkpoint carries no vocabulary")
    vocab, params = ckpt.vocab, ckpt.params
    lines = [ln.strip() for ln in Path(args.input).read_text(encoding="utf-8").splitlines()]
    out = []
    for idx, line in enumerate(ln for ln in lines if ln):
        tokens = tokenize(line)
        if not tokens:
            continue
        ids = tuple(encode(vocab, tokens, params.config.max_length))
        try:
            request = GenerationRequest(ids, seed=(base_seed, idx), **kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        variants = [
            {"text": detokenize(decode(vocab, r.tokens)), "logprob": r.log_probability}
            for r in sample_paraphrases(params, request)
        ]
        out.append(json.dumps({"input": line, "variants": variants}, ensure_ascii=False) + "\n")
    Path(args.out).write_text("".join(out), encoding="utf-8")
    return EXIT_OK


def load_references(path) -> dict:
    """TSV ``input<TAB>reference[<TAB>reference...]``; repeated inputs pool references."""
    refs = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        key, targets = tuple(tokenize(fields[0])), [tokenize(f) for f in fields[1:]]
        targets = [t for t in targets if t]
        if not key or not targets:
            raise DataError(f"{path}:{lineno}: expected input<TAB>reference")
        refs.setdefault(key, []).extend(targets)
    return refs


def load_generated(path, references):
    """Generated records joined with their references, in file order."""
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            source = rec["input"]
            variants = [tokenize(v["text"]) for v in rec["variants"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed generation record ({exc})") from exc
        if not variants:
            raise DataError(f"{path}:{lineno}: record has no variants")
        key = tuple(tokenize(source))
        if key not in references:
            raise DataError(f"{path}:{lineno}: no reference for input {source!r}")
        rows.append({"line": lineno, "input": list(key), "variants": variants,
                     "references": references[key]})
    if not rows:
        raise DataError(f"{path}: no generation records")
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_evaluate(args) -> int:
    rows = load_generated(args.generated, load_references(args.references))
    reports = [metrics.aggregate(r["variants"], r["input"], r["references"]) for r in rows]
    table = []
    for measure in metrics.MEASURES:
        for metric in metrics.METRICS:
            value = float(np.mean([rep.value(measure, metric) for rep in reports]))
            table.append((measure, metric, f"{100.0 * value:.1f}"))
    _write_csv(args.out, ("measure", "metric", "value"), table)
    if args.detail:
        with open(args.detail, "w", encoding="utf-8") as fh:
            for row, rep in zip(rows, reports):
                fh.write(json.dumps({"line": row["line"], "input": " ".join(row["input"]),
                                     "scores": rep.per_variant, "chosen": rep.chosen}) + "\n")
    return EXIT_OK


def parse_thresholds(text, confidences):
    if text.strip() == "auto":
        return metrics.auto_thresholds(confidences)
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --thresholds {text!r}") from exc
    if not values or any(b < a for a, b in zip(values, values[1:])):
        raise UsageError("--thresholds must be a nonempty nondecreasing list or 'auto'")
    return values


def _fmt(value, scale=1.0, digits=4):
    return "" if value is None else f"{scale * value:.{digits}f}"


def cmd_curve(args) -> int:
    rows = load_generated(args.generated, load_references(args.references))
    records = [{"input": r["input"], "variant": v, "references": r["references"]}
               for r in rows for v in r["variants"]]
    conf = [metrics.confidence(r["variant"], r["input"], args.confidence) for r in records]
    thresholds = parse_thresholds(args.thresholds, conf)
    points = metrics.recall_curve(records, conf, thresholds)
    _write_csv(args.out, ("threshold", "recall", "bleu", "meteor", "ter"), [
        (_fmt(p.threshold), _fmt(p.recall), _fmt(p.bleu, 100, 2), _fmt(p.meteor, 100, 2),
         _fmt(p.ter, 100, 2))
        for p in points
    ])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate,
            "curve": cmd_curve}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, PosteriorUnavailableError) as exc:
        print(f"paravae {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"paravae {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, DataFormatError, CheckpointError, EmptySequenceError,
            FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"paravae {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
