"""Conditional variational autoencoder for paraphrase generation, on a small numpy autodiff."""

from .corpus import Vocabulary, build_vocab, encode, decode, load_pairs, tokenize
from .generator import GenerationRequest, beam_search, greedy_decode, sample_paraphrases
from .metrics import aggregate, bleu, meteor_lite, recall_curve, ter
from .model import ModelConfig, ParaphraseVaeParams, count_parameters, elbo_loss
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "GenerationRequest",
    "ModelConfig",
    "ParaphraseVaeParams",
    "TrainConfig",
    "Vocabulary",
    "aggregate",
    "beam_search",
    "bleu",
    "build_vocab",
    "count_parameters",
    "decode",
    "elbo_loss",
    "encode",
    "greedy_decode",
    "load_checkpoint",
    "load_pairs",
    "meteor_lite",
    "recall_curve",
    "sample_paraphrases",
    "save_checkpoint",
    "ter",
    "tokenize",
    "train",
]
