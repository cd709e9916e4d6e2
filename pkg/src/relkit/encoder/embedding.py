"""Relation embeddings: render a pair into a prompt, encode, aggregate."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data import WordPair
from .. import prompting
from .model import EncoderModel, pad_batch


class Aggregation(str, enum.Enum):
    MASK = "mask"
    AVERAGE = "average"
    AVERAGE_WO_MASK = "average_wo_mask"

    @classmethod
    def parse(cls, value) -> "Aggregation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").replace(" ", "_"))
        except ValueError:
            raise ValueError(f"unknown aggregation {value!r}; expected one of {[a.value for a in cls]}") from None


DEFAULT_AGGREGATION = Aggregation.AVERAGE_WO_MASK


@dataclass(frozen=True)
class RelationEmbedding:
    vector: np.ndarray
    pair: WordPair
    template_id: int
    aggregation: Aggregation
    model_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"non-finite relation embedding for {self.pair}")


def aggregation_weights(ids: np.ndarray, model: EncoderModel, aggregation) -> np.ndarray:
    """Per-position weights so that embedding = sum_t w[b, t] * hidden[b, t].

    Content positions exclude padding and the begin/end delimiters. ``mask``
    averages over mask positions (one for the built-in templates).
    """
    aggregation = Aggregation.parse(aggregation)
    vocab = model.vocab
    is_mask = ids == vocab.mask_id
    content = (ids != vocab.pad_id) & (ids != vocab.bos_id) & (ids != vocab.eos_id)
    if aggregation is Aggregation.MASK:
        keep = is_mask
    elif aggregation is Aggregation.AVERAGE:
        keep = content
    else:
        keep = content & ~is_mask
    counts = keep.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError(f"a prompt has no positions to aggregate under {aggregation.value!r}")
    return (keep / counts).astype(model.dtype)


def render_pairs(model: EncoderModel, template: prompting.PromptTemplate,
                 pairs: Sequence[WordPair]) -> list[prompting.RenderedPrompt]:
    prompts = [prompting.render(template, p, model.vocab) for p in pairs]
    for pair, prompt in zip(pairs, prompts):
        if len(prompt.token_ids) > model.config.max_len:
            raise ValueError(
                f"prompt for {pair} has {len(prompt.token_ids)} tokens, max_len={model.config.max_len}"
            )
    return prompts


@dataclass
class PairForward:
    """Recorded state needed to push embedding gradients back into the encoder."""

    weights: np.ndarray


def embed_pairs(model: EncoderModel, template: prompting.PromptTemplate, pairs: Sequence[WordPair],
                aggregation=DEFAULT_AGGREGATION, record: bool = False, batch_size: int = 256):
    """Embed many pairs at once; returns an (n, d) array.

    With ``record=True`` the whole set is encoded as one batch and a
    ``PairForward`` is returned alongside, for ``backward_pairs``.
    """
    if not pairs:
        return np.zeros((0, model.config.d_model), dtype=model.dtype)
    prompts = render_pairs(model, template, pairs)
    if record:
        ids, mask = pad_batch([p.token_ids for p in prompts], model.vocab.pad_id)
        weights = aggregation_weights(ids, model, aggregation)
        hidden = model.forward(ids, mask, record=True)
        return np.einsum("bt,btd->bd", weights, hidden), PairForward(weights)
    chunks = []
    for start in range(0, len(prompts), batch_size):
        chunk = prompts[start : start + batch_size]
        ids, mask = pad_batch([p.token_ids for p in chunk], model.vocab.pad_id)
        hidden = model.forward(ids, mask)
        chunks.append(np.einsum("bt,btd->bd", aggregation_weights(ids, model, aggregation), hidden))
    return np.concatenate(chunks)


def backward_pairs(model: EncoderModel, state: PairForward, d_embeddings) -> dict[str, np.ndarray]:
    d_hidden = state.weights[:, :, None] * np.asarray(d_embeddings, dtype=model.dtype)[:, None, :]
    return model.backward(d_hidden)


def embed_pair(model: EncoderModel, template: prompting.PromptTemplate, pair: WordPair,
               aggregation=DEFAULT_AGGREGATION) -> RelationEmbedding:
    aggregation = Aggregation.parse(aggregation)
    vector = embed_pairs(model, template, [pair], aggregation)[0]
    return RelationEmbedding(vector, pair, template.id, aggregation, model.model_id)
