from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .embedding import (
    DEFAULT_AGGREGATION,
    Aggregation,
    RelationEmbedding,
    aggregation_weights,
    backward_pairs,
    embed_pair,
    embed_pairs,
)
from .model import EncoderConfig, EncoderModel, init_parameters, pad_batch, parameter_shapes
from .vocab import SPECIALS, Vocabulary, VocabError, build_vocab, normalize, split_words

__all__ = [
    "Aggregation", "CheckpointError", "DEFAULT_AGGREGATION", "EncoderConfig", "EncoderModel",
    "RelationEmbedding", "SPECIALS", "VocabError", "Vocabulary", "aggregation_weights",
    "backward_pairs", "build_vocab", "embed_pair", "embed_pairs", "init_parameters",
    "load_checkpoint", "normalize", "pad_batch", "parameter_shapes", "read_manifest",
    "save_checkpoint", "split_words",
]
