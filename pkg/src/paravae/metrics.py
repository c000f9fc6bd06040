"""BLEU, METEOR-lite and TER on token lists, plus variant aggregation and recall curves.

All scores live in [0, 1] (TER in [0, inf)); scaling to 0-100 happens at
the command-line boundary.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySequenceError

METRICS = ("bleu", "meteor", "ter")
MEASURES = ("avg", "best-bleu", "best-meteor")
MAX_N = 4

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def _as_references(references):
    """Accept one token list or a list of token lists."""
    refs = list(references)
    if not refs:
        raise EmptySequenceError("need at least one reference")
    if isinstance(refs[0], str):
        refs = [refs]
    return [list(r) for r in refs]


def ngram_counts(tokens, n) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate, references, n):
    """``(clipped matches, candidate n-gram total)`` for one order."""
    cand = ngram_counts(candidate, n)
    max_ref = Counter()
    for ref in references:
        for gram, c in ngram_counts(ref, n).items():
            max_ref[gram] = max(max_ref[gram], c)
    matched = sum(min(c, max_ref[gram]) for gram, c in cand.items())
    return matched, max(len(candidate) - n + 1, 0)


def closest_ref_length(c, references):
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def brevity_penalty(c, r):
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def bleu(candidate, references) -> float:
    """Sentence BLEU-4 with uniform weights.

    When every raw precision is positive the plain geometric mean is used.
    Otherwise orders two and up get add-one smoothing; a zero unigram
    precision still scores 0.
    """
    candidate = list(candidate)
    if not candidate:
        raise EmptySequenceError("empty candidate")
    refs = _as_references(references)
    counts = [modified_precision(candidate, refs, n) for n in range(1, MAX_N + 1)]
    if counts[0][0] == 0:
        return 0.0
    smooth = any(m == 0 for m, _ in counts[1:])
    log_p = 0.0
    for n, (m, total) in enumerate(counts, 1):
        if smooth and n >= 2:
            m, total = m + 1, total + 1
        log_p += math.log(m / total)
    bp = brevity_penalty(len(candidate), closest_ref_length(len(candidate), refs))
    return bp * math.exp(log_p / MAX_N)


def corpus_bleu(candidates, references_list) -> float:
    """Corpus BLEU-4: counts and lengths pooled over sentences, unsmoothed."""
    if len(candidates) != len(references_list):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise EmptySequenceError("empty corpus")
    matched = [0] * MAX_N
    totals = [0] * MAX_N
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        cand = list(cand)
        refs = _as_references(refs)
        for n in range(1, MAX_N + 1):
            m, t = modified_precision(cand, refs, n)
            matched[n - 1] += m
            totals[n - 1] += t
        c_len += len(cand)
        r_len += closest_ref_length(len(cand), refs)
    if c_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, totals)) / MAX_N
    return brevity_penalty(c_len, r_len) * math.exp(log_p)


_VOWELS = set("aeiouy")
_NO_UNDOUBLE = set("lsz")


def _undouble(w):
    if len(w) >= 2 and w[-1] == w[-2] and w[-1] not in _VOWELS and w[-1] not in _NO_UNDOUBLE:
        return w[:-1]
    return w


def stem(word: str) -> str:
    """Small suffix stripper.

    One plural rule (``sses``->``ss``, ``ies``->``y``, ``xes/ches/shes``
    drop ``es``, else a trailing ``s`` not preceded by ``s``), then at most
    one of ``ing est ed ly er``.  A suffix is removed only if at least three
    letters remain; after a derivational strip a doubled final consonant
    other than l/s/z is undoubled.
    """
    w = word.lower()
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies") and len(w) - 3 >= 2:
        w = w[:-3] + "y"
    elif w.endswith(("xes", "ches", "shes")):
        w = w[:-2]
    elif w.endswith("s") and not w.endswith("ss") and len(w) - 1 >= 3:
        w = w[:-1]
    for suffix in ("ing", "est", "ed", "ly", "er"):
        if w.endswith(suffix) and len(w) - len(suffix) >= 3:
            return _undouble(w[: -len(suffix)])
    return w


def meteor_alignment(candidate, reference):
    """Candidate index -> reference index, exact stage then stem stage.

    Each stage walks the candidate left to right and takes the leftmost free
    reference position that matches.
    """
    alignment = {}
    used = set()
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in reference]
        for i, tok in enumerate(candidate):
            if i in alignment:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if j not in used and rk == k:
                    alignment[i] = j
                    used.add(j)
                    break
    return alignment


def count_chunks(alignment) -> int:
    chunks = 0
    prev = None
    for i in sorted(alignment):
        j = alignment[i]
        if prev is None or prev != (i - 1, j - 1):
            chunks += 1
        prev = (i, j)
    return chunks


def _meteor_single(candidate, reference):
    alignment = meteor_alignment(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (count_chunks(alignment) / m) ** METEOR_BETA
    return f * (1.0 - penalty)


def meteor_lite(candidate, references) -> float:
    """METEOR with exact and stem matching only; best over references."""
    candidate = list(candidate)
    if not candidate:
        raise EmptySequenceError("empty candidate")
    refs = _as_references(references)
    if any(not r for r in refs):
        raise EmptySequenceError("empty reference")
    return max(_meteor_single(candidate, r) for r in refs)


def levenshtein(a, b) -> int:
    """Word-level edit distance with unit insert/delete/substitute costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def block_shifts(seq):
    """Every distinct-position block move as ``(start, length, dest, result)``.

    Ordered by start, then length, then destination in the remaining sequence.
    """
    seq = tuple(seq)
    n = len(seq)
    for i in range(n):
        for length in range(1, n - i + 1):
            block = seq[i : i + length]
            rest = seq[:i] + seq[i + length :]
            for j in range(len(rest) + 1):
                if j != i:
                    yield i, length, j, rest[:j] + block + rest[j:]


def ter_edits(candidate, reference):
    """``(shift count, residual edit distance)`` from greedy shifting.

    Each round applies the shift giving the largest strict drop in edit
    distance; ties keep the first one in :func:`block_shifts` order.
    """
    cur = tuple(candidate)
    ref = tuple(reference)
    dist = levenshtein(cur, ref)
    n_shifts = 0
    while dist > 0:
        best_dist, best_seq = dist, None
        seen = set()
        for *_, shifted in block_shifts(cur):
            if shifted in seen:
                continue
            seen.add(shifted)
            d = levenshtein(shifted, ref)
            if d < best_dist:
                best_dist, best_seq = d, shifted
        if best_seq is None:
            break
        cur, dist = best_seq, best_dist
        n_shifts += 1
    return n_shifts, dist


def ter(candidate, references) -> float:
    """Edits per reference word; minimum over references."""
    candidate = list(candidate)
    refs = _as_references(references)
    if any(not r for r in refs):
        raise EmptySequenceError("empty reference")
    return min(sum(ter_edits(candidate, r)) / len(r) for r in refs)


SCORERS = {"bleu": bleu, "meteor": meteor_lite, "ter": ter}


def score(metric, candidate, references) -> float:
    """Like the scorer itself, except an empty candidate gets BLEU and METEOR 0."""
    if metric not in SCORERS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if len(candidate) == 0 and metric != "ter":
        return 0.0
    return SCORERS[metric](candidate, references)


def score_all(candidate, references) -> dict:
    return {m: score(m, candidate, references) for m in METRICS}


def select_variant(variants, source, metric) -> int:
    """Index of the variant closest to the input sentence under ``metric``.

    Highest score wins (lowest for TER); ties go to the lowest index.
    """
    scores = [score(metric, v, [source]) for v in variants]
    if metric == "ter":
        return int(np.argmin(scores))
    return int(np.argmax(scores))


@dataclass
class MetricReport:
    """Scores of every variant against the ground truth and the avg/best views."""

    per_variant: list
    chosen: dict
    aggregate: dict = field(default_factory=dict)

    def value(self, measure, metric):
        return self.aggregate[measure][metric]


def aggregate(variants, source, references) -> MetricReport:
    """Average over variants, and the scores of variants picked against the input.

    ``best-bleu`` picks the variant with the highest BLEU against ``source``
    (likewise ``best-meteor``, and ``best-ter`` by lowest TER) and reports
    that variant's scores against ``references``.  The references never enter
    the selection.
    """
    variants = [list(v) for v in variants]
    if not variants:
        raise EmptySequenceError("no variants to aggregate")
    source = list(source)
    refs = _as_references(references)
    per_variant = [score_all(v, refs) for v in variants]
    chosen = {f"best-{m}": select_variant(variants, source, m) for m in METRICS}
    agg = {"avg": {m: float(np.mean([s[m] for s in per_variant])) for m in METRICS}}
    for measure, idx in chosen.items():
        agg[measure] = dict(per_variant[idx])
    return MetricReport(per_variant, chosen, agg)


def confidence(variant, source, metric) -> float:
    """How close a variant stays to its input; TER is flipped to ``1 - TER``."""
    value = score(metric, variant, [source])
    return 1.0 - value if metric == "ter" else value


@dataclass
class CurvePoint:
    threshold: float
    recall: float
    bleu: float | None
    meteor: float | None
    ter: float | None


def recall_curve(records, confidence_metric, thresholds):
    """Recall and mean scores of the records whose confidence exceeds each threshold.

    ``records`` holds dicts with ``input``, ``variant`` and ``references``
    token lists.  ``confidence_metric`` is a metric name or a sequence of
    precomputed confidences, one per record.  Thresholds must be
    nondecreasing.  A threshold that keeps nothing yields ``None`` averages.
    """
    records = list(records)
    if not records:
        raise EmptySequenceError("no records")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be nondecreasing")
    if isinstance(confidence_metric, str):
        conf = [confidence(r["variant"], r["input"], confidence_metric) for r in records]
    else:
        conf = [float(c) for c in confidence_metric]
        if len(conf) != len(records):
            raise ValueError("one confidence per record required")
    conf = np.asarray(conf)
    scores = [score_all(r["variant"], r["references"]) for r in records]
    table = {m: np.array([s[m] for s in scores]) for m in METRICS}
    points = []
    for tau in thresholds:
        keep = conf > tau
        kept = int(keep.sum())
        means = {m: (float(table[m][keep].mean()) if kept else None) for m in METRICS}
        points.append(CurvePoint(tau, kept / len(records), **means))
    return points


def auto_thresholds(confidences, count=20):
    """``count`` evenly spaced quantiles (0 to 1 inclusive) of the confidences."""
    return [float(q) for q in np.quantile(np.asarray(confidences, dtype=float),
                                          np.linspace(0.0, 1.0, count))]
