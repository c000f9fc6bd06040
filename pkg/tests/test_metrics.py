import math
import random
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from paravae.errors import EmptySequenceError
from paravae.metrics import (
    aggregate,
    auto_thresholds,
    bleu,
    confidence,
    corpus_bleu,
    count_chunks,
    levenshtein,
    meteor_alignment,
    meteor_lite,
    modified_precision,
    recall_curve,
    select_variant,
    stem,
    ter,
    ter_edits,
)

sentences = st.lists(st.sampled_from("a b c d e f".split()), min_size=1, max_size=8)


def toks(s):
    return s.split()


def exhaustive_ter_edits(cand, ref):
    """Fewest (shifts + edits): BFS over every reachable shifted sequence."""
    def moves(seq):
        n = len(seq)
        for i in range(n):
            for j in range(i + 1, n + 1):
                block, rest = seq[i:j], seq[:i] + seq[j:]
                for k in range(len(rest) + 1):
                    yield rest[:k] + block + rest[k:]

    start = tuple(cand)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        for t in moves(s):
            if t not in dist:
                dist[t] = dist[s] + 1
                queue.append(t)
    return min(k + levenshtein(s, ref) for s, k in dist.items())


# BLEU ---------------------------------------------------------------------

def test_bleu_identity():
    s = toks("the cat sat on the mat")
    assert bleu(s, [s]) == 1.0


def test_bleu_brevity_penalty_example():
    assert abs(bleu(toks("a b c d"), [toks("a b c d e")]) - math.exp(1 - 5 / 4)) < 1e-9


def test_bleu_no_overlap_is_zero():
    assert bleu(toks("x y z"), [toks("a b c")]) == 0.0


def test_bleu_smoothed_by_hand():
    cand = toks("how do i learn python fast")
    ref = toks("what is the best way to learn python")
    # p1 = 2/6; p2 raw 1/5 -> 2/6; p3 0/4 -> 1/5; p4 0/3 -> 1/4; BP exp(1 - 8/6)
    expected = math.exp(1 - 8 / 6) * ((2 / 6) * (2 / 6) * (1 / 5) * (1 / 4)) ** 0.25
    assert abs(bleu(cand, [ref]) - expected) < 1e-12


def test_bleu_clips_against_best_reference():
    assert modified_precision(toks("the the the"), [toks("the cat"), toks("the the dog")], 1) == (2, 3)


def test_bleu_closest_reference_length_prefers_shorter_on_tie():
    cand = toks("a b c d e f")
    refs = [toks("a b c d e f g h"), toks("a b c d")]
    assert abs(bleu(cand, refs) - 1.0) < 1e-12
    refs = [toks("a b c d e f g"), toks("a b c d e")]
    # lengths 7 and 5 are both distance 1 from 6; 5 is chosen, so no penalty
    assert abs(bleu(cand, refs) - 1.0) < 1e-12


def test_bleu_rejects_empty():
    with pytest.raises(EmptySequenceError):
        bleu([], [["a"]])
    with pytest.raises(EmptySequenceError):
        bleu(["a"], [])


def test_corpus_bleu_identity_and_zero():
    cands = [toks("a b c d e"), toks("x y z w")]
    assert corpus_bleu(cands, [[c] for c in cands]) == 1.0
    assert corpus_bleu([toks("a")], [[toks("b")]]) == 0.0


@settings(max_examples=80, deadline=None)
@given(sentences, st.lists(sentences, min_size=1, max_size=3))
def test_bleu_bounded(cand, refs):
    assert 0.0 <= bleu(cand, refs) <= 1.0


@settings(max_examples=60, deadline=None)
@given(sentences, sentences, st.randoms(use_true_random=False))
def test_unigram_precision_ignores_order(cand, ref, rnd):
    shuffled = list(cand)
    rnd.shuffle(shuffled)
    assert modified_precision(cand, [ref], 1) == modified_precision(shuffled, [ref], 1)


# METEOR-lite ----------------------------------------------------------------

def test_meteor_identity_four_tokens():
    s = toks("a b c d")
    assert abs(meteor_lite(s, s) - 0.9921875) < 1e-12


def test_meteor_stem_stage():
    assert abs(meteor_lite(["run"], ["running"]) - 0.5) < 1e-12


def test_meteor_no_match():
    assert meteor_lite(toks("x y"), toks("a b")) == 0.0


def test_meteor_by_hand_two_chunks():
    cand, ref = toks("a b x c"), toks("c a b")
    # exact: a->1, b->2, c->0; chunks: (a,b) then c -> 2; m=3
    assert meteor_alignment(cand, ref) == {0: 1, 1: 2, 3: 0}
    assert count_chunks(meteor_alignment(cand, ref)) == 2
    p, r = 3 / 4, 3 / 3
    f = p * r / (0.9 * p + 0.1 * r)
    assert abs(meteor_lite(cand, ref) - f * (1 - 0.5 * (2 / 3) ** 3)) < 1e-12


def test_meteor_exact_stage_runs_before_stem():
    # "runs" would stem-match "run" but the exact "running" must be taken first
    assert meteor_alignment(toks("running runs"), toks("run running")) == {0: 1, 1: 0}


def test_meteor_best_of_references():
    assert meteor_lite(toks("a b c d"), [toks("x y"), toks("a b c d")]) == meteor_lite(
        toks("a b c d"), toks("a b c d"))


@pytest.mark.parametrize("word,expected", [
    ("running", "run"), ("runs", "run"), ("cats", "cat"), ("jumped", "jump"),
    ("bigger", "big"), ("fastest", "fast"), ("quickly", "quick"), ("flies", "fly"),
    ("classes", "class"), ("boxes", "box"), ("falling", "fall"), ("buzzing", "buzz"),
    ("need", "need"), ("red", "red"), ("is", "is"),
])
def test_stemmer_rules(word, expected):
    assert stem(word) == expected


@settings(max_examples=80, deadline=None)
@given(sentences, sentences)
def test_meteor_bounded(cand, ref):
    assert 0.0 <= meteor_lite(cand, ref) <= 1.0


# TER ---------------------------------------------------------------------

def test_ter_examples():
    assert ter(toks("a b c"), toks("a b c")) == 0.0
    assert abs(ter(toks("a b c"), toks("a c")) - 0.5) < 1e-12
    assert abs(ter(toks("c a b"), toks("a b c")) - 1 / 3) < 1e-12
    assert ter_edits(toks("c a b"), toks("a b c")) == (1, 0)


def test_ter_minimum_over_references():
    assert ter(toks("a b"), [toks("x y z"), toks("a b")]) == 0.0


def test_ter_empty_candidate_counts_insertions():
    assert ter([], toks("a b")) == 1.0


def test_ter_rejects_empty_reference():
    with pytest.raises(EmptySequenceError):
        ter(["a"], [])


def test_ter_greedy_matches_exhaustive_on_small_pairs():
    rng = random.Random(7)
    for _ in range(60):
        a = [rng.choice("abcd") for _ in range(rng.randint(1, 4))]
        b = [rng.choice("abcd") for _ in range(rng.randint(1, 4))]
        assert sum(ter_edits(a, b)) == exhaustive_ter_edits(a, b), (a, b)


def test_ter_greedy_can_miss_the_optimum():
    # a documented limit of greedy shifting: two shifts would do, greedy spends three edits
    cand, ref = list("bcbac"), list("cbcab")
    assert exhaustive_ter_edits(cand, ref) == 2
    assert sum(ter_edits(cand, ref)) == 3


@settings(max_examples=60, deadline=None)
@given(sentences, sentences)
def test_ter_between_optimum_and_plain_edit_distance(cand, ref):
    edits = sum(ter_edits(cand, ref))
    assert edits <= levenshtein(cand, ref)
    if len(cand) <= 4 and len(ref) <= 4:
        assert edits >= exhaustive_ter_edits(cand, ref)


# aggregation -------------------------------------------------------------

SOURCE = toks("how do i learn python fast")
TRUTH = [toks("what is the best way to learn python")]
VARIANTS = [toks("what is the best way to learn python"), SOURCE,
            toks("python")]


def test_single_variant_avg_equals_best():
    rep = aggregate([VARIANTS[0]], SOURCE, TRUTH)
    assert rep.chosen == {"best-bleu": 0, "best-meteor": 0, "best-ter": 0}
    for m in ("bleu", "meteor", "ter"):
        assert rep.value("avg", m) == rep.value("best-bleu", m)


def test_selection_uses_input_not_ground_truth():
    rep = aggregate(VARIANTS, SOURCE, TRUTH)
    assert rep.per_variant[0]["bleu"] == 1.0
    assert rep.chosen["best-bleu"] == 1
    assert rep.value("best-bleu", "bleu") == bleu(VARIANTS[1], TRUTH)
    expected = math.exp(1 - 8 / 6) * ((2 / 6) * (2 / 6) * (1 / 5) * (1 / 4)) ** 0.25
    assert abs(rep.value("best-bleu", "bleu") - expected) < 1e-12


def test_avg_is_mean_of_per_variant():
    rep = aggregate(VARIANTS, SOURCE, TRUTH)
    for m in ("bleu", "meteor", "ter"):
        assert abs(rep.value("avg", m) - np.mean([s[m] for s in rep.per_variant])) < 1e-12


def test_select_ties_go_to_lowest_index():
    assert select_variant([toks("a b"), toks("a b")], toks("a b"), "bleu") == 0
    assert select_variant([toks("x"), toks("a b")], toks("a b"), "ter") == 1


def test_aggregate_needs_variants():
    with pytest.raises(EmptySequenceError):
        aggregate([], SOURCE, TRUTH)


def test_empty_variant_scores_zero():
    rep = aggregate([[], VARIANTS[0]], SOURCE, TRUTH)
    assert rep.per_variant[0] == {"bleu": 0.0, "meteor": 0.0, "ter": 1.0}


@settings(max_examples=40, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=4), sentences,
       st.lists(sentences, min_size=1, max_size=3), st.lists(sentences, min_size=1, max_size=3))
def test_chosen_indices_ignore_references(variants, source, refs_a, refs_b):
    assert aggregate(variants, source, refs_a).chosen == aggregate(variants, source, refs_b).chosen


# recall curve ------------------------------------------------------------

def _records(n=10):
    return [{"input": toks("a b c d"), "variant": toks("a b c d"), "references": [toks("a b c d")]}
            for _ in range(n)]


def test_recall_hand_fixture():
    conf = [0.1 * i for i in range(10)]
    points = recall_curve(_records(), conf, [0.55])
    assert points[0].recall == 0.4


def test_recall_extremes():
    recs = _records(3)
    recs[1]["variant"] = toks("a b x y")
    points = recall_curve(recs, "bleu", [-1.0, 2.0])
    assert points[0].recall == 1.0
    assert_allclose(points[0].bleu, np.mean([bleu(r["variant"], r["references"]) for r in recs]))
    assert points[1].recall == 0.0
    assert points[1].bleu is None and points[1].ter is None


def test_recall_validates_inputs():
    with pytest.raises(EmptySequenceError):
        recall_curve([], "bleu", [0.0])
    with pytest.raises(ValueError):
        recall_curve(_records(), "bleu", [0.5, 0.1])
    with pytest.raises(ValueError):
        recall_curve(_records(), [0.1], [0.0])


def test_ter_confidence_is_flipped():
    assert confidence(toks("a b"), toks("a b"), "ter") == 1.0
    assert confidence(toks("x y"), toks("a b"), "ter") == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15),
       st.lists(st.floats(-0.5, 1.5), min_size=1, max_size=10))
def test_recall_nonincreasing(conf, thresholds):
    recs = _records(len(conf))
    points = recall_curve(recs, conf, sorted(thresholds))
    recalls = [p.recall for p in points]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


def test_auto_thresholds_are_twenty_quantiles():
    qs = auto_thresholds([0.1 * i for i in range(10)])
    assert len(qs) == 20
    assert qs[0] == 0.0 and abs(qs[-1] - 0.9) < 1e-12
    assert qs == sorted(qs)
