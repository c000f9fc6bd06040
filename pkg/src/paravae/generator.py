"""Paraphrase generation: one decode per latent draw.

Variety comes from the latent code, not from the beam: every variant is
the top hypothesis for its own ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .corpus import BOS, EOS, collate, SentencePair
from .errors import EmptySequenceError, PosteriorUnavailableError
from .model import (
    Graph,
    ParaphraseVaeParams,
    decoder_init_state,
    decoder_step,
    encode_original,
    recognize,
)

Z_MODES = ("prior-sample", "posterior-mean", "posterior-sample")
DECODE_MODES = ("greedy", "beam")


@dataclass
class GenerationRequest:
    input_ids: tuple
    num_samples: int = 3
    decode_mode: str = "greedy"
    beam_size: int = 10
    max_decode_length: int = 16
    seed: int | tuple = 0
    z_mode: str = "prior-sample"
    paraphrase_ids: tuple | None = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_decode_length < 1:
            raise ValueError("max_decode_length must be >= 1")
        if self.z_mode not in Z_MODES:
            raise ValueError(f"z_mode must be one of {Z_MODES}")


@dataclass
class LatentSample:
    z: np.ndarray
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None


@dataclass
class DecodingResult:
    tokens: list
    log_probability: float
    z: LatentSample | None = None
    steps: int = 0

    @property
    def score(self):
        """Length-normalized log-probability (length counts the EOS step)."""
        return self.log_probability / max(self.steps, 1)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _Decoder:
    """Incremental decoder over rows of hypotheses sharing one (z, x_o)."""

    def __init__(self, params, z, x_o):
        self.graph = Graph(params, Tape(record=False), trainable=False)
        self.z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        self.x_o = None if x_o is None else np.asarray(x_o, dtype=np.float64).reshape(1, -1)

    def initial_state(self):
        g = self.graph
        x = None if self.x_o is None else g.constant(self.x_o)
        return [(h.value, c.value) for h, c in decoder_init_state(g, x, 1)]

    def step(self, prev_ids, state):
        """Log-probabilities for every row plus the advanced state."""
        g = self.graph
        rows = len(prev_ids)
        z = g.constant(np.repeat(self.z, rows, axis=0))
        nodes = [(g.constant(h), g.constant(c)) for h, c in state]
        logits, new_state = decoder_step(g, np.asarray(prev_ids, dtype=np.int64), z, nodes)
        return _log_softmax(logits.value), [(h.value, c.value) for h, c in new_state]


def _take(state, rows):
    return [(h[rows], c[rows]) for h, c in state]


def greedy_decode(params: ParaphraseVaeParams, z, x_o, max_len: int) -> DecodingResult:
    """Argmax decoding from BOS; ties go to the lowest token id."""
    dec = _Decoder(params, z, x_o)
    state = dec.initial_state()
    prev, tokens, logp = BOS, [], 0.0
    steps = 0
    for _ in range(max_len):
        lp, state = dec.step([prev], state)
        tok = int(np.argmax(lp[0]))
        logp += float(lp[0, tok])
        steps += 1
        if tok == EOS:
            break
        tokens.append(tok)
        prev = tok
    return DecodingResult(tokens, logp, LatentSample(np.asarray(z)), steps)


def _ranked_token_ids(row, k):
    """Top ``k`` ids of one log-prob row: highest first, ties by lower id."""
    order = np.lexsort((np.arange(row.size), -row))
    return order[:k]


def beam_search(params: ParaphraseVaeParams, z, x_o, beam_size: int, max_len: int):
    """Length-normalized beam search; returns up to ``beam_size`` results, best first.

    Hypotheses are expanded over the whole vocabulary and pruned to
    ``beam_size`` by summed log-probability.  One that emits EOS moves to the
    finished pool; search stops once the pool is full or ``max_len`` steps
    have run.  Final order: log-prob / steps descending, then token ids
    lexicographically.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    dec = _Decoder(params, z, x_o)
    state = dec.initial_state()
    alive = [((), 0.0)]
    finished = []
    steps = 0
    while steps < max_len and alive:
        prev = [seq[-1] if seq else BOS for seq, _ in alive]
        lp, new_state = dec.step(prev, state)
        steps += 1
        candidates = []
        for row, (seq, score) in enumerate(alive):
            for tok in _ranked_token_ids(lp[row], beam_size):
                candidates.append((score + float(lp[row, tok]), seq + (int(tok),), row))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        alive, rows = [], []
        for score, seq, row in candidates[:beam_size]:
            if seq[-1] == EOS:
                finished.append((seq, score))
            else:
                alive.append((seq, score))
                rows.append(row)
        if len(finished) >= beam_size:
            break
        state = _take(new_state, rows)
    pool = finished + (alive if steps >= max_len else [])
    pool.sort(key=lambda item: (-item[1] / len(item[0]), item[0]))
    sample = LatentSample(np.asarray(z))
    return [
        DecodingResult(list(seq[:-1]) if seq[-1] == EOS else list(seq), score, sample, len(seq))
        for seq, score in pool[:beam_size]
    ]


def decoder_condition(params: ParaphraseVaeParams, input_ids):
    """x_o for the decoder side (``None`` for the unsupervised variant)."""
    if len(input_ids) == 0:
        raise EmptySequenceError("empty input sentence")
    if not params.config.conditioned:
        return None
    g = Graph(params, Tape(record=False), trainable=False)
    return encode_original(g, list(input_ids), "decoder").value[0]


def posterior_of(params: ParaphraseVaeParams, input_ids, paraphrase_ids=None):
    """Posterior ``(mu, logvar)`` when the variant can compute it."""
    cfg = params.config
    g = Graph(params, Tape(record=False), trainable=False)
    if cfg.variant == "unsupervised":
        mu, lv = recognize(g, None, list(input_ids))
    elif cfg.variant == "vae-s":
        x = encode_original(g, list(input_ids), "recognition")
        mu, lv = recognize(g, x, None)
    else:
        if paraphrase_ids is None:
            raise PosteriorUnavailableError(
                f"{cfg.variant} needs a paraphrase to compute the posterior")
        batch = collate([SentencePair(tuple(input_ids), tuple(paraphrase_ids))])
        x = encode_original(g, batch.originals, "recognition", batch.original_lengths)
        mu, lv = recognize(g, x, batch.paraphrases, batch.paraphrase_lengths)
    return mu.value[0], lv.value[0]


def sample_paraphrases(params: ParaphraseVaeParams, request: GenerationRequest):
    """``num_samples`` variants, one best decode per latent draw, in draw order."""
    K = params.config.latent_dim
    x_o = decoder_condition(params, request.input_ids)
    rng = np.random.default_rng(request.seed)
    eps = rng.standard_normal((request.num_samples, K))
    mu = logvar = None
    if request.z_mode != "prior-sample":
        mu, logvar = posterior_of(params, request.input_ids, request.paraphrase_ids)
    results = []
    for i in range(request.num_samples):
        if request.z_mode == "prior-sample":
            z = eps[i]
        elif request.z_mode == "posterior-mean":
            z = mu
        else:
            z = mu + np.exp(0.5 * logvar) * eps[i]
        if request.decode_mode == "greedy":
            res = greedy_decode(params, z, x_o, request.max_decode_length)
        else:
            res = beam_search(params, z, x_o, request.beam_size, request.max_decode_length)[0]
        res.z = LatentSample(np.asarray(z), mu, logvar)
        results.append(res)
    return results
