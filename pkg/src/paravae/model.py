"""The conditional sentence-variant VAE and its baselines.

Four LSTMs at most: two original-sentence encoders (one feeding the
posterior, one initializing the decoder), a paraphrase encoder, and the
decoder.  Variants drop or share pieces:

==============  ==================================================
vae-svg         all four LSTMs
vae-svg-eq      one original-sentence encoder shared by both sides
vae-s           no paraphrase encoder; the posterior reads x_o
unsupervised    plain sentence VAE over the original sentence
==============  ==================================================

Parameter tensors live in a flat ``name -> ndarray`` dict; a model is run by
binding it to a :class:`~paravae.autodiff.Tape` through :class:`Graph`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Node, Tape
from .corpus import BOS, UNK, Batch, DEFAULT_MAX_LENGTH, SentencePair, collate, pad
from .errors import EmptySequenceError, ShapeMismatchError

VARIANTS = ("vae-svg", "vae-svg-eq", "vae-s", "unsupervised")

# parameter groups
EMBEDDING = "embedding"
ENC_ORIG_REC = "enc_orig_rec"
ENC_PARA = "enc_para"
ENC_ORIG_DEC = "enc_orig_dec"
REC_INIT = "rec_init"
HEAD = "head"
DECODER = "decoder"
DEC_INIT = "dec_init"
OUTPUT = "output"


@dataclass
class ModelConfig:
    vocab_size: int
    variant: str = "vae-svg"
    embed_dim: int = 300
    hidden_dim: int = 600
    latent_dim: int = 1100
    encoder_layers: int = 1
    decoder_layers: int = 2
    max_length: int = DEFAULT_MAX_LENGTH
    word_dropout: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "latent_dim",
                     "encoder_layers", "decoder_layers", "max_length"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.word_dropout <= 1.0:
            raise ValueError("word_dropout must lie in [0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def encoder_stacks(self):
        """Encoder stacks that own parameters, in manifest order."""
        return {
            "vae-svg": (ENC_ORIG_REC, ENC_PARA, ENC_ORIG_DEC),
            "vae-svg-eq": (ENC_ORIG_REC, ENC_PARA),
            "vae-s": (ENC_ORIG_REC, ENC_ORIG_DEC),
            "unsupervised": (ENC_PARA,),
        }[self.variant]

    @property
    def conditioned(self):
        return self.variant != "unsupervised"

    def side_stack(self, side):
        """Stack used to encode the original sentence on ``side``."""
        if side == "recognition":
            return ENC_ORIG_REC
        if side == "decoder":
            return ENC_ORIG_REC if self.variant == "vae-svg-eq" else ENC_ORIG_DEC
        raise ValueError(f"side must be 'recognition' or 'decoder', got {side!r}")


def _lstm_count(in_dim, hidden):
    return 4 * (in_dim * hidden + hidden * hidden + hidden)


def _stack_count(in_dim, hidden, num_layers):
    return _lstm_count(in_dim, hidden) + (num_layers - 1) * _lstm_count(hidden, hidden)


def count_parameters(config: ModelConfig) -> int:
    """Number of scalar parameters, computed from the config alone."""
    V, E, H, K = config.vocab_size, config.embed_dim, config.hidden_dim, config.latent_dim
    total = V * E + (H * V + V) + 2 * (H * K + K)
    total += _stack_count(E + K, H, config.decoder_layers)
    total += len(config.encoder_stacks) * _stack_count(E, H, config.encoder_layers)
    if config.variant in ("vae-svg", "vae-svg-eq"):
        width = 2 * H * config.encoder_layers
        total += H * width + width
    if config.conditioned:
        width = 2 * H * config.decoder_layers
        total += H * width + width
    return total


def _lstm_shapes(prefix, in_dim, hidden, num_layers):
    out = {}
    for k in range(num_layers):
        width = in_dim if k == 0 else hidden
        for kind, shape in (("W", (width, hidden)), ("U", (hidden, hidden)), ("b", (hidden,))):
            for gate in layers.GATES:
                out[f"{prefix}.l{k}.{kind}_{gate}"] = shape
    return out


def parameter_shapes(config: ModelConfig) -> dict:
    """Ordered ``name -> shape`` table of every tensor the variant owns."""
    V, E, H, K = config.vocab_size, config.embed_dim, config.hidden_dim, config.latent_dim
    shapes = {EMBEDDING: (V, E)}
    for stack in config.encoder_stacks:
        shapes.update(_lstm_shapes(stack, E, H, config.encoder_layers))
    if config.variant in ("vae-svg", "vae-svg-eq"):
        width = 2 * H * config.encoder_layers
        shapes.update({f"{REC_INIT}.W": (H, width), f"{REC_INIT}.b": (width,)})
    for name in ("W_mu", "b_mu", "W_logvar", "b_logvar"):
        shapes[f"{HEAD}.{name}"] = (H, K) if name.startswith("W") else (K,)
    shapes.update(_lstm_shapes(DECODER, E + K, H, config.decoder_layers))
    if config.conditioned:
        width = 2 * H * config.decoder_layers
        shapes.update({f"{DEC_INIT}.W": (H, width), f"{DEC_INIT}.b": (width,)})
    shapes.update({f"{OUTPUT}.W": (H, V), f"{OUTPUT}.b": (V,)})
    return shapes


class ParaphraseVaeParams:
    """All learnable tensors of one model, keyed by dotted name."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, config: ModelConfig, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        V, E, H, K = config.vocab_size, config.embed_dim, config.hidden_dim, config.latent_dim
        t = {EMBEDDING: layers.xavier_uniform(rng, V, E)}
        for stack in config.encoder_stacks:
            t.update(layers.init_lstm_stack(rng, E, H, config.encoder_layers, f"{stack}."))
        if config.variant in ("vae-svg", "vae-svg-eq"):
            t.update(layers.init_linear(rng, H, 2 * H * config.encoder_layers, f"{REC_INIT}."))
        t.update(layers.init_gaussian_head(rng, H, K, f"{HEAD}."))
        t.update(layers.init_lstm_stack(rng, E + K, H, config.decoder_layers, f"{DECODER}."))
        if config.conditioned:
            t.update(layers.init_linear(rng, H, 2 * H * config.decoder_layers, f"{DEC_INIT}."))
        t.update(layers.init_linear(rng, H, V, f"{OUTPUT}."))
        shapes = parameter_shapes(config)
        return cls(config, {k: t[k] for k in shapes})

    @classmethod
    def zeros(cls, config: ModelConfig):
        return cls(config, {k: np.zeros(s) for k, s in parameter_shapes(config).items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        if np.shape(value) != self.tensors[name].shape:
            raise ShapeMismatchError(f"{name}: expected {self.tensors[name].shape}")
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __iter__(self):
        return iter(self.tensors)

    def names(self, group=None):
        if group is None:
            return list(self.tensors)
        return [k for k in self.tensors if k == group or k.startswith(group + ".")]

    def copy(self):
        return ParaphraseVaeParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def groups(self):
        return sorted({k.split(".")[0] for k in self.tensors})


class Graph:
    """A model's parameters bound as leaves (or constants) on one tape."""

    def __init__(self, params: ParaphraseVaeParams, tape: Tape | None = None, trainable=True):
        self.params = params
        self.config = params.config
        self.tape = tape if tape is not None else Tape()
        make = self.tape.leaf if trainable else self.tape.constant
        self.nodes = {k: make(v) for k, v in params.tensors.items()}
        self._cells = {}

    @classmethod
    def from_nodes(cls, config: ModelConfig, tape: Tape, nodes: dict):
        """Bind already-created nodes (e.g. leaves owned by a gradient check)."""
        graph = cls.__new__(cls)
        graph.params = None
        graph.config = config
        graph.tape = tape
        graph.nodes = dict(nodes)
        graph._cells = {}
        return graph

    def __getitem__(self, name):
        return self.nodes[name]

    def cells(self, stack):
        if stack not in self._cells:
            nl = self.config.decoder_layers if stack == DECODER else self.config.encoder_layers
            self._cells[stack] = layers.stack_cells(self.nodes, nl, f"{stack}.")
        return self._cells[stack]

    def constant(self, value):
        return self.tape.constant(value)


class LossTerms(NamedTuple):
    total: Node
    nll: Node
    kl: Node


def as_batch(tokens, lengths=None):
    """Accept a single id sequence, a list of them, or a padded matrix."""
    if lengths is not None:
        return np.asarray(tokens, dtype=np.int64), np.asarray(lengths, dtype=np.int64)
    arr = tokens
    if len(arr) == 0:
        raise EmptySequenceError("empty token sequence")
    if np.isscalar(arr[0]) or isinstance(arr[0], (np.integer, int)):
        arr = [arr]
    if any(len(s) == 0 for s in arr):
        raise EmptySequenceError("empty token sequence")
    return pad([list(s) for s in arr])


def _embed_steps(graph, tokens):
    table = graph[EMBEDDING]
    return [layers.embed(table, tokens[:, t]) for t in range(tokens.shape[1])]


def _split_state(proj: Node, hidden, num_layers):
    state = []
    for k in range(num_layers):
        h = ad.slice_(proj, 2 * k * hidden, (2 * k + 1) * hidden)
        c = ad.slice_(proj, (2 * k + 1) * hidden, (2 * k + 2) * hidden)
        state.append((h, c))
    return state


def encode_original(graph: Graph, s_o, side="decoder", lengths=None) -> Node:
    """Final top-layer hidden state of the original-sentence encoder on ``side``."""
    tokens, lengths = as_batch(s_o, lengths)
    stack = graph.config.side_stack(side)
    if stack not in graph.config.encoder_stacks:
        raise ValueError(f"variant {graph.config.variant} has no {side}-side encoder")
    _, state = layers.lstm_encode(graph.cells(stack), _embed_steps(graph, tokens), lengths=lengths)
    return state[-1][0]


def recognize(graph: Graph, x_o: Node | None, s_p, lengths=None):
    """Posterior parameters ``(mu, logvar)``.

    vae-s ignores ``s_p``; unsupervised encodes ``s_p`` (the original sentence)
    from a zero state and ignores ``x_o``.
    """
    cfg = graph.config
    if cfg.variant == "vae-s":
        return layers.gaussian_head(graph.nodes, x_o, f"{HEAD}.")
    tokens, lengths = as_batch(s_p, lengths)
    init = None
    if cfg.variant != "unsupervised":
        proj = layers.linear(graph.nodes, x_o, f"{REC_INIT}.")
        init = _split_state(proj, cfg.hidden_dim, cfg.encoder_layers)
    _, state = layers.lstm_encode(
        graph.cells(ENC_PARA), _embed_steps(graph, tokens), init_state=init, lengths=lengths
    )
    return layers.gaussian_head(graph.nodes, state[-1][0], f"{HEAD}.")


def decoder_init_state(graph: Graph, x_o: Node | None, batch_size: int):
    cfg = graph.config
    cells = graph.cells(DECODER)
    if not cfg.conditioned or x_o is None:
        return layers.zero_state(graph.tape, cells, (batch_size,))
    proj = layers.linear(graph.nodes, x_o, f"{DEC_INIT}.")
    return _split_state(proj, cfg.hidden_dim, cfg.decoder_layers)


def decoder_step(graph: Graph, prev_ids, z: Node, state):
    """Feed ``concat(embed(prev), z)`` through the decoder stack once."""
    x = ad.concat([layers.embed(graph[EMBEDDING], prev_ids), z])
    new_state = []
    for cell, (h, c) in zip(graph.cells(DECODER), state):
        h, c = cell.step(x, h, c)
        new_state.append((h, c))
        x = h
    logits = layers.linear(graph.nodes, x, f"{OUTPUT}.")
    return logits, new_state


def decoder_inputs(targets, dropout_mask=None):
    """Previous-token ids per step: BOS then targets shifted, UNK where masked."""
    targets = np.asarray(targets, dtype=np.int64)
    prev = np.empty_like(targets)
    prev[:, 0] = BOS
    prev[:, 1:] = targets[:, :-1]
    if dropout_mask is not None:
        mask = np.asarray(dropout_mask, dtype=bool)
        if mask.shape != targets.shape:
            raise ShapeMismatchError(f"dropout mask {mask.shape} != targets {targets.shape}")
        prev = np.where(mask, UNK, prev)
    return prev


def decode_teacher_forced(graph: Graph, z: Node, x_o: Node | None, s_p, dropout_mask=None,
                          lengths=None):
    """Logits per decoder step (one ``(batch, vocab)`` node per target position)."""
    tokens, lengths = as_batch(s_p, lengths)
    if z.shape != (tokens.shape[0], graph.config.latent_dim):
        raise ShapeMismatchError(f"z has shape {z.shape}")
    prev = decoder_inputs(tokens, dropout_mask)
    state = decoder_init_state(graph, x_o, tokens.shape[0])
    logits = []
    for t in range(tokens.shape[1]):
        step_logits, state = decoder_step(graph, prev[:, t], z, state)
        logits.append(step_logits)
    return logits


def sequence_nll(graph: Graph, logits, targets, lengths) -> Node:
    """Summed cross-entropy over valid target positions, for each row."""
    tape = graph.tape
    total = None
    V = graph.config.vocab_size
    eye = np.eye(V)
    for t, step_logits in enumerate(logits):
        probs = ad.softmax(step_logits)
        picked = ad.sum_(probs * tape.constant(eye[targets[:, t]]), axis=-1)
        valid = tape.constant((lengths > t).astype(np.float64))
        term = ad.log(picked) * valid
        total = term if total is None else total + term
    return -total


def encode_sides(graph: Graph, batch: Batch):
    """``(x_o for the posterior, x_o for the decoder)`` for a batch."""
    cfg = graph.config
    if not cfg.conditioned:
        return None, None
    o, ol = batch.originals, batch.original_lengths
    x_rec = encode_original(graph, o, "recognition", ol)
    if cfg.variant == "vae-svg-eq":
        return x_rec, x_rec
    return x_rec, encode_original(graph, o, "decoder", ol)


def posterior(graph: Graph, batch: Batch):
    x_rec, _ = encode_sides(graph, batch)
    if graph.config.conditioned:
        return recognize(graph, x_rec, batch.paraphrases, batch.paraphrase_lengths)
    return recognize(graph, None, batch.originals, batch.original_lengths)


def targets_of(config: ModelConfig, batch: Batch):
    if config.conditioned:
        return batch.paraphrases, batch.paraphrase_lengths
    return batch.originals, batch.original_lengths


def elbo_loss(graph: Graph, batch, kl_weight: float, noise, dropout_mask=None) -> LossTerms:
    """Negative ELBO: ``nll + kl_weight * kl``, one latent sample per pair.

    Both terms are summed over time/latent dims and averaged over the batch.
    ``noise`` has shape ``(batch, latent_dim)``; ``dropout_mask`` marks
    decoder-input positions replaced by UNK.
    """
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError("kl_weight must lie in [0, 1]")
    if isinstance(batch, SentencePair):
        batch = collate([batch])
    cfg = graph.config
    x_rec, x_dec = encode_sides(graph, batch)
    if cfg.conditioned:
        mu, logvar = recognize(graph, x_rec, batch.paraphrases, batch.paraphrase_lengths)
    else:
        mu, logvar = recognize(graph, None, batch.originals, batch.original_lengths)
    code = layers.reparameterize(mu, logvar, np.asarray(noise, dtype=np.float64))
    targets, lengths = targets_of(cfg, batch)
    if dropout_mask is not None and np.shape(dropout_mask) != targets.shape:
        raise ShapeMismatchError(f"dropout mask {np.shape(dropout_mask)} != {targets.shape}")
    logits = decode_teacher_forced(graph, code.z, x_dec, targets, dropout_mask, lengths)
    inv_b = 1.0 / batch.size
    nll = ad.scale(ad.sum_(sequence_nll(graph, logits, targets, lengths)), inv_b)
    kl = ad.scale(layers.kl_gaussian(mu, logvar), inv_b)
    total = nll + ad.scale(kl, kl_weight)
    return LossTerms(total, nll, kl)


def sample_dropout_mask(rng, shape, rate):
    if rate <= 0.0:
        return np.zeros(shape, dtype=bool)
    return rng.random(shape) < rate
