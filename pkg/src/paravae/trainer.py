"""Iteration-based training with KL annealing, plus binary checkpoints.

Checkpoint layout (all integers little-endian)::

    b"PVAE" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header carries the model config, a train-config snapshot, the
vocabulary, the iteration counter, the RNG state and a tensor manifest
(name, shape, byte offset) plus the CRC32 of the payload.  The payload is
every tensor as IEEE-754 float32, concatenated in manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .corpus import Vocabulary, collate, iterate_batches
from .errors import (
    ManifestCorruptionError,
    NonFiniteError,
    TrainingDivergedError,
    VersionMismatchError,
)
from .model import (
    Graph,
    ModelConfig,
    ParaphraseVaeParams,
    elbo_loss,
    parameter_shapes,
    posterior,
    sample_dropout_mask,
    targets_of,
)

log = logging.getLogger(__name__)

MAGIC = b"PVAE"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class TrainConfig:
    total_iterations: int
    learning_rate: float = 5e-5
    batch_size: int = 32
    kl_warmup_iterations: int | None = None
    optimizer: str = "sgd"
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.kl_warmup_iterations is not None and not (
            0 <= self.kl_warmup_iterations <= self.total_iterations
        ):
            raise ValueError("kl_warmup_iterations must lie in [0, total_iterations]")

    @property
    def warmup(self) -> int:
        if self.kl_warmup_iterations is None:
            return self.total_iterations // 5
        return self.kl_warmup_iterations

    @classmethod
    def desk_preset(cls, total_iterations, **overrides):
        """Adam at 1e-3: the fast setting used for small toy runs."""
        kw = dict(total_iterations=total_iterations, learning_rate=1e-3, optimizer="adam")
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def kl_anneal_weight(iteration: int, warmup_iterations: int) -> float:
    """Linear ramp from 0 to 1 over the warmup; no warmup means weight 1."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if warmup_iterations <= 0:
        return 1.0
    return min(1.0, iteration / warmup_iterations)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads, clip_norm):
    """Rescale so the global norm is at most ``clip_norm`` (0 disables)."""
    norm = global_norm(grads)
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def update(self, tensors, grads):
        for name, g in grads.items():
            tensors[name] = tensors[name] - self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def update(self, tensors, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            tensors[name] = tensors[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return SGD(config.learning_rate)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParaphraseVaeParams
    vocab: Vocabulary | None = None
    iteration: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    format_version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, params, vocab=None, iteration=0, rng=None, train_config=None):
        """Snapshot ``params`` at float32 precision, as it will be stored."""
        rounded = {k: v.astype(np.float32).astype(np.float64) for k, v in params.tensors.items()}
        return cls(
            model_config=params.config,
            params=ParaphraseVaeParams(params.config, rounded),
            vocab=vocab,
            iteration=iteration,
            rng_state=None if rng is None else rng.bit_generator.state,
            train_config=None if train_config is None else train_config.to_dict(),
        )


def _manifest(params):
    entries, offset = [], 0
    for name, arr in params.tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    return entries, offset


def predicted_payload_bytes(params) -> int:
    return _manifest(params)[1]


def save_checkpoint(ckpt: Checkpoint, path):
    entries, size = _manifest(ckpt.params)
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in ckpt.params.tensors.values()
    )
    assert len(payload) == size
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "vocab": None if ckpt.vocab is None else ckpt.vocab.itos,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
        "payload_bytes": size,
        "crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ManifestCorruptionError(f"{path}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ManifestCorruptionError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise ManifestCorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
        entries = header["tensors"]
        expected = header["payload_bytes"]
        crc = header["crc32"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestCorruptionError(f"{path}: unreadable header ({exc})") from exc
    payload = data[start:]
    if len(payload) != expected:
        raise ManifestCorruptionError(
            f"{path}: payload is {len(payload)} bytes, manifest says {expected}"
        )
    if zlib.crc32(payload) != crc:
        raise ManifestCorruptionError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if entry["name"] in tensors or off + 4 * count > len(payload):
            raise ManifestCorruptionError(f"{path}: bad manifest entry {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)
    expected_shapes = parameter_shapes(config)
    if {k: v.shape for k, v in tensors.items()} != expected_shapes:
        raise ManifestCorruptionError(f"{path}: manifest does not match the model config")
    vocab = None if header.get("vocab") is None else Vocabulary.from_list(header["vocab"])
    return Checkpoint(
        model_config=config,
        params=ParaphraseVaeParams(config, tensors),
        vocab=vocab,
        iteration=header.get("iteration", 0),
        rng_state=header.get("rng_state"),
        train_config=header.get("train_config"),
        format_version=version,
    )


@dataclass
class Trainer:
    """Step-at-a-time training loop; :meth:`run` drives it to completion.

    Each step takes the next batch (reshuffling at epoch boundaries), draws
    latent noise and a word-dropout mask, and applies one clipped update.
    """

    params: ParaphraseVaeParams
    config: TrainConfig
    pairs: list
    vocab: Vocabulary | None = None
    log_file: str | Path | None = None
    checkpoint_path: str | Path | None = None
    iteration: int = 0
    records: list = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("training corpus is empty")
        self.params = self.params.copy()
        self.rng = np.random.default_rng(self.config.seed)
        self.optimizer = make_optimizer(self.config)
        self._batches = iterate_batches(self.pairs, self.config.batch_size, self.config.seed)
        self.last_grads = None
        self._log = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.params, self.vocab, self.iteration, self.rng, self.config)

    def step(self) -> dict:
        batch = next(self._batches)
        mcfg = self.params.config
        weight = kl_anneal_weight(self.iteration, self.config.warmup)
        noise = self.rng.standard_normal((batch.size, mcfg.latent_dim))
        targets, _ = targets_of(mcfg, batch)
        mask = sample_dropout_mask(self.rng, targets.shape, mcfg.word_dropout)
        try:
            graph = Graph(self.params)
            terms = elbo_loss(graph, batch, weight, noise, mask)
            grads = graph.tape.backward(terms.total)
            grads = {k: grads[node] for k, node in graph.nodes.items()}
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise NonFiniteError("non-finite gradient")
        except NonFiniteError as exc:
            raise TrainingDivergedError(
                f"training diverged at iteration {self.iteration}: {exc}", self.checkpoint()
            ) from exc
        clipped, norm = clip_gradients(grads, self.config.clip_norm)
        self.last_grads = grads
        self.optimizer.update(self.params.tensors, clipped)
        record = {
            "iteration": self.iteration,
            "nll": float(terms.nll.value),
            "kl": float(terms.kl.value),
            "kl_weight": weight,
            "grad_norm": norm,
            "batch": batch.indices,
        }
        self.records.append(record)
        if self._log is not None:
            self._log.write(json.dumps(record) + "\n")
        self.iteration += 1
        every = self.config.checkpoint_every
        if self.checkpoint_path and every > 0 and self.iteration % every == 0:
            save_checkpoint(self.checkpoint(), self.checkpoint_path)
        return record

    def run(self) -> Checkpoint:
        self._log = open(self.log_file, "w", encoding="utf-8") if self.log_file else None
        try:
            while self.iteration < self.config.total_iterations:
                self.step()
        finally:
            if self._log is not None:
                self._log.close()
                self._log = None
        ckpt = self.checkpoint()
        if self.checkpoint_path:
            save_checkpoint(ckpt, self.checkpoint_path)
        return ckpt


def train(params, config: TrainConfig, pairs, vocab=None, log_file=None, checkpoint_path=None):
    """Run ``config.total_iterations`` steps; returns ``(checkpoint, records)``."""
    trainer = Trainer(params, config, pairs, vocab, log_file, checkpoint_path)
    ckpt = trainer.run()
    return ckpt, trainer.records


def evaluate(params, pairs, batch_size=64):
    """Mean reconstruction NLL and KL with z at the posterior mean, no dropout."""
    nll = kl = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        batch = collate(chunk)
        graph = Graph(params, Tape(record=False), trainable=False)
        terms = elbo_loss(graph, batch, 1.0, np.zeros((batch.size, params.config.latent_dim)))
        nll += float(terms.nll.value) * batch.size
        kl += float(terms.kl.value) * batch.size
    return nll / len(pairs), kl / len(pairs)


def posterior_means(params, pairs):
    graph = Graph(params, Tape(record=False), trainable=False)
    mu, _ = posterior(graph, collate(pairs))
    return mu.value
