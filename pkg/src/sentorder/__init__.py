"""Set-to-sequence sentence ordering on a small numpy autodiff core."""
from .errors import (ConfigError, CorruptionError, DeterminismError, DimensionError, DomainError,
                     FormatError, NumericError, SentOrderError, TapeError, VocabularyError)
from .model import ModelConfig, coherence_score, encode_set, init_params
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .decode import beam_order, discriminate, discrimination_accuracy, evaluate, kendall_tau
from .data import SyntheticSpec, Vocab, generate_synthetic, tokenize
from .analysis import export_sentence_embeddings, word_salience

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CorruptionError", "DeterminismError", "DimensionError", "DomainError",
    "FormatError", "NumericError", "SentOrderError", "TapeError", "VocabularyError",
    "ModelConfig", "coherence_score", "encode_set", "init_params",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "beam_order", "discriminate", "discrimination_accuracy", "evaluate", "kendall_tau",
    "SyntheticSpec", "Vocab", "generate_synthetic", "tokenize",
    "export_sentence_embeddings", "word_salience",
]
