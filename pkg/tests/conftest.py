import numpy as np
import pytest

from paravae.corpus import RawPair, build_vocab, encode_pair, tokenize

NOUNS = ["man", "woman", "dog", "cat", "boy"]
VERBS = ["runs", "sits", "eats", "sleeps", "jumps"]
PLACES = ["park", "house", "street", "table", "beach"]
ADJS = ["big", "small", "red", "old"]


def toy_raw_pairs(seed=0, n_originals=10):
    """Ten templated sentences, each with two reordered paraphrases (20 pairs)."""
    rng = np.random.default_rng(seed)
    pairs, seen = [], set()
    while len(pairs) < 2 * n_originals:
        n, v, p, a = rng.choice(NOUNS), rng.choice(VERBS), rng.choice(PLACES), rng.choice(ADJS)
        if (n, v, p, a) in seen:
            continue
        seen.add((n, v, p, a))
        orig = tokenize(f"a {a} {n} {v} in the {p}")
        pairs.append(RawPair(orig, tokenize(f"the {n} that is {a} {v} near the {p}")))
        pairs.append(RawPair(orig, tokenize(f"in the {p} a {a} {n} {v}")))
    return pairs


@pytest.fixture(scope="session")
def toy_raw():
    return toy_raw_pairs()


@pytest.fixture(scope="session")
def toy_vocab(toy_raw):
    return build_vocab(toy_raw)


@pytest.fixture(scope="session")
def toy_pairs(toy_raw, toy_vocab):
    return [encode_pair(toy_vocab, p) for p in toy_raw]


@pytest.fixture
def toy_tsv(tmp_path, toy_raw):
    path = tmp_path / "pairs.tsv"
    path.write_text("".join(f"{' '.join(p.original)}\t{' '.join(p.paraphrase)}\n"
                            for p in toy_raw), encoding="utf-8")
    return path


_CRITERIA = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(marker, "PASS")
        if report.skipped:
            outcome = "SKIP"
        elif report.failed:
            outcome = "FAIL"
        else:
            outcome = "PASS"
        rank = {"FAIL": 2, "SKIP": 1, "PASS": 0}
        _CRITERIA[marker] = outcome if rank[outcome] >= rank[prev] else prev


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s[1:])):
        terminalreporter.write_line(f"{name}: {_CRITERIA[name]}")
