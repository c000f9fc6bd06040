"""Tokenization, vocabularies, pair loading and batching."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_MAX_LENGTH = 15

_PUNCT = r""".,?!;:'"()\-"""
_TOKEN_RE = re.compile(rf"[{_PUNCT}]|[^\s{_PUNCT}]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and detach ``.,?!;:'"()-``."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Dense token <-> id bijection with four reserved ids at the front."""

    def __init__(self, tokens=()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != SPECIALS:
            raise DataFormatError(f"{path}: vocabulary must start with {SPECIALS}")
        if len(set(lines)) != len(lines):
            raise DataFormatError(f"{path}: duplicate tokens in vocabulary")
        return cls(lines[4:])

    @classmethod
    def from_list(cls, itos):
        if tuple(itos[:4]) != SPECIALS:
            raise DataFormatError("vocabulary list must start with the special tokens")
        return cls(itos[4:])


class RawPair(NamedTuple):
    original: list[str]
    paraphrase: list[str]


@dataclass(frozen=True)
class SentencePair:
    """Encoded (original, paraphrase) ids, each terminated by EOS."""

    original: tuple[int, ...]
    paraphrase: tuple[int, ...]

    def __post_init__(self):
        if not self.original or not self.paraphrase:
            raise ValueError("sentence pair sides must be non-empty")
        if PAD in self.original or PAD in self.paraphrase:
            raise ValueError("PAD id inside a sentence")


def build_vocab(corpus, min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first.

    ``corpus`` is an iterable of token sequences or of :class:`RawPair`.
    Ties are broken lexicographically; ``max_size`` counts the specials.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for item in corpus:
        if isinstance(item, RawPair):
            counts.update(item.original)
            counts.update(item.paraphrase)
        else:
            counts.update(item)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - len(SPECIALS))]
    return Vocabulary(kept)


def encode(vocab: Vocabulary, tokens, max_length: int = DEFAULT_MAX_LENGTH) -> list[int]:
    """Map to ids, keep the first ``max_length`` tokens, then append EOS."""
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    return [vocab.id(t) for t in tokens[:max_length]] + [EOS]


def decode(vocab: Vocabulary, ids) -> list[str]:
    """Inverse of :func:`encode`: stops at the first EOS."""
    out = []
    for i in ids:
        if i == EOS:
            break
        out.append(vocab.token(int(i)))
    return out


def encode_pair(vocab, pair: RawPair, max_length=DEFAULT_MAX_LENGTH) -> SentencePair:
    return SentencePair(
        tuple(encode(vocab, pair.original, max_length)),
        tuple(encode(vocab, pair.paraphrase, max_length)),
    )


def _parse_tsv(line):
    parts = line.split("\t")
    if len(parts) != 2:
        return None
    return parts


def _parse_jsonl(line):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    orig, para = obj.get("original"), obj.get("paraphrase")
    if not isinstance(orig, str) or not isinstance(para, str):
        return None
    return orig, para


def load_pairs(path, fmt: str = "tsv") -> list[RawPair]:
    """Read tokenized pairs from a TSV or JSONL file, in file order.

    Malformed lines are skipped and reported once as a warning; more than
    half malformed raises :class:`DataFormatError`.
    """
    parsers = {"tsv": _parse_tsv, "jsonl": _parse_jsonl}
    if fmt not in parsers:
        raise ValueError(f"unknown format {fmt!r}; expected tsv or jsonl")
    parse = parsers[fmt]
    text = Path(path).read_text(encoding="utf-8")
    pairs, bad, total = [], [], 0
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        total += 1
        fields = parse(line)
        if fields is None:
            bad.append(lineno)
            continue
        orig, para = tokenize(fields[0]), tokenize(fields[1])
        if not orig or not para:
            bad.append(lineno)
            continue
        pairs.append(RawPair(orig, para))
    if bad:
        log.warning("%s: skipped %d malformed line(s) of %d (first: line %d)",
                    path, len(bad), total, bad[0])
        if len(bad) * 2 > total:
            raise DataFormatError(f"{path}: {len(bad)} of {total} lines are malformed")
    return pairs


@dataclass
class Batch:
    """Tail-padded id matrices; ``indices`` are positions in the source corpus."""

    originals: np.ndarray
    original_lengths: np.ndarray
    paraphrases: np.ndarray
    paraphrase_lengths: np.ndarray
    indices: list[int] = field(default_factory=list)

    @property
    def size(self):
        return len(self.original_lengths)


def pad(seqs, pad_id=PAD):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = s
    return out, lengths


def collate(pairs, indices=None) -> Batch:
    origs, olens = pad([p.original for p in pairs])
    paras, plens = pad([p.paraphrase for p in pairs])
    idx = list(range(len(pairs))) if indices is None else list(indices)
    return Batch(origs, olens, paras, plens, idx)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(pairs, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0):
    """One epoch of batches: shuffle once, then slice sequentially.

    ``shuffle_seed=None`` keeps corpus order.  The last short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not pairs:
        raise DataFormatError("cannot batch an empty corpus")
    n = len(pairs)
    order = np.arange(n) if shuffle_seed is None else epoch_order(n, shuffle_seed, epoch)
    batches = []
    for start in range(0, n, batch_size):
        idx = [int(i) for i in order[start : start + batch_size]]
        batches.append(collate([pairs[i] for i in idx], idx))
    return batches


def iterate_batches(pairs, batch_size, seed):
    """Endless stream of batches, reshuffled at every epoch boundary."""
    epoch = 0
    while True:
        yield from make_batches(pairs, batch_size, seed, epoch)
        epoch += 1
