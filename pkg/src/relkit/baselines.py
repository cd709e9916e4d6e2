"""Comparison systems: word-vector offsets and perplexity-based analogy solving.

Token scorers return log-probability vectors over the vocabulary so that tiny
probabilities never underflow. Three kinds exist:

* causal       ``next_token_logprobs(prefix)``
* masked       ``masked_logprobs(ids, position)`` (``ids[position]`` is the mask)
* conditional  ``decoder_logprobs(premise, prefix)``
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import AnalogyQuestion, WordPair
from .encoder import EncoderModel, Vocabulary

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# word-vector offsets
# ---------------------------------------------------------------------------


class OutOfVocabulary(KeyError):
    pass


class WordVectorTable:
    def __init__(self, vectors: Mapping[str, np.ndarray], fallback: str = "zero"):
        if fallback not in ("zero", "error"):
            raise ValueError("fallback must be 'zero' or 'error'")
        if not vectors:
            raise ValueError("empty word-vector table")
        self.vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError(f"word vectors must share one dimension, got {sorted(dims)}")
        self.dim = next(iter(dims))[0]
        self.fallback = fallback

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def lookup(self, word: str) -> np.ndarray:
        vec = self.vectors.get(word)
        if vec is None:
            if self.fallback == "error":
                raise OutOfVocabulary(word)
            logger.warning("word %r not in the vector table; using a zero vector", word)
            return np.zeros(self.dim)
        return vec


def load_word_vectors(path, fallback: str = "zero") -> WordVectorTable:
    """Text format ``word v1 ... vd``; an optional ``count dim`` header line is skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    vectors = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            try:
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad vector line") from None
    return WordVectorTable(vectors, fallback)


def vector_offset_embed(table: WordVectorTable, pair: WordPair) -> np.ndarray:
    """wv(tail) - wv(head)."""
    return table.lookup(pair.tail) - table.lookup(pair.head)


class OffsetEmbedder:
    def __init__(self, table: WordVectorTable):
        self.table = table

    def embed(self, pairs):
        return np.array([vector_offset_embed(self.table, p) for p in pairs]).reshape(len(pairs), self.table.dim)


# ---------------------------------------------------------------------------
# token scorers
# ---------------------------------------------------------------------------

CAUSAL, MASKED, CONDITIONAL = "causal", "masked", "conditional"


class UniformScorer:
    """Every token equally likely, for any kind of query."""

    def __init__(self, vocab_size: int, kind: str = CAUSAL):
        self.vocab_size = vocab_size
        self.kind = kind
        self.n_calls = 0

    def _uniform(self):
        self.n_calls += 1
        return np.full(self.vocab_size, -np.log(np.longdouble(self.vocab_size)))

    def next_token_logprobs(self, prefix):
        return self._uniform()

    def masked_logprobs(self, ids, position):
        return self._uniform()

    def decoder_logprobs(self, premise, prefix):
        return self._uniform()


class BigramScorer:
    """Add-k smoothed bigram model over token ids; a small causal scorer.

    As a conditional scorer the decoder sees the last premise token as its
    initial context, which is the only way a bigram model can condition.
    """

    def __init__(self, sequences: Sequence[Sequence[int]], vocab_size: int, bos_id: int, k: float = 0.1,
                 kind: str = CAUSAL):
        if kind not in (CAUSAL, CONDITIONAL):
            raise ValueError(f"a bigram model cannot act as a {kind} scorer")
        self.kind = kind
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.k = k
        self.counts: dict[int, Counter] = {}
        for seq in sequences:
            prev = bos_id
            for tok in seq:
                self.counts.setdefault(prev, Counter())[tok] += 1
                prev = tok

    def _dist(self, prev: int) -> np.ndarray:
        row = np.full(self.vocab_size, self.k)
        for tok, n in self.counts.get(prev, {}).items():
            row[tok] += n
        return np.log(row) - np.log(row.sum())

    def next_token_logprobs(self, prefix):
        return self._dist(prefix[-1] if len(prefix) else self.bos_id)

    def decoder_logprobs(self, premise, prefix):
        if len(prefix):
            return self._dist(prefix[-1])
        return self._dist(premise[-1] if len(premise) else self.bos_id)


class EncoderMaskedScorer:
    """Masked-token distributions from the bundled encoder's tied output head."""

    kind = MASKED

    def __init__(self, model: EncoderModel):
        self.model = model
        self.vocab_size = len(model.vocab)
        self.n_calls = 0

    def masked_logprobs(self, ids, position):
        self.n_calls += 1
        vocab = self.model.vocab
        seq = np.array([[vocab.bos_id, *ids, vocab.eos_id]])
        return self.model.mlm_logprobs(seq)[0, position + 1].astype(np.float64)


# ---------------------------------------------------------------------------
# perplexities
# ---------------------------------------------------------------------------


def _perplexity(log_probs: Sequence[float]) -> float:
    # extended-precision accumulation (where the platform has it) keeps the
    # final rounding to float64 exact, e.g. a uniform scorer gives back |V|
    lp = np.asarray(log_probs, dtype=np.longdouble)
    if np.isneginf(lp).any():
        logger.warning("zero probability token; perplexity is +inf")
        return math.inf
    return float(np.exp(-lp.sum() / len(lp)))


def clm_perplexity(scorer, sentence: Sequence[int]) -> float:
    """exp(-mean_j log P(s_j | s_<j)); +inf when a token has probability 0."""
    if len(sentence) == 0:
        raise ValueError("empty sentence")
    return _perplexity([scorer.next_token_logprobs(sentence[:j])[tok] for j, tok in enumerate(sentence)])


def mlm_pseudo_perplexity(scorer, sentence: Sequence[int], mask_id: int) -> float:
    """Perplexity form with P(s_j | sentence with s_j masked); one scorer call per position."""
    if len(sentence) == 0:
        raise ValueError("empty sentence")
    log_probs = []
    for j, tok in enumerate(sentence):
        masked = list(sentence)
        masked[j] = mask_id
        log_probs.append(scorer.masked_logprobs(masked, j)[tok])
    return _perplexity(log_probs)


def ed_conditional_perplexity(scorer, premise: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Perplexity of ``hypothesis`` under a decoder conditioned on ``premise``."""
    if len(premise) == 0 or len(hypothesis) == 0:
        raise ValueError("premise and hypothesis must be non-empty")
    return _perplexity(
        [scorer.decoder_logprobs(premise, hypothesis[:j])[tok] for j, tok in enumerate(hypothesis)]
    )


def analogy_sentence(query: WordPair, candidate: WordPair, connective_in: str = "hypothesis"):
    """The "A is to B what C is to D" sentence, split into (premise, hypothesis).

    ``connective_in`` places "what" in the hypothesis (default), the premise, or
    drops it ("none") for the encoder-decoder split.
    """
    premise = f"{query.head} is to {query.tail}"
    rest = f"{candidate.head} is to {candidate.tail}"
    if connective_in == "hypothesis":
        return premise, f"what {rest}"
    if connective_in == "premise":
        return f"{premise} what", rest
    if connective_in == "none":
        return premise, rest
    raise ValueError(f"connective_in must be hypothesis, premise or none, not {connective_in!r}")


@dataclass(frozen=True)
class PerplexityPrediction:
    index: int
    scores: tuple[float, ...]
    degenerate: bool


def solve_by_perplexity(scorer, question: AnalogyQuestion, vocab: Vocabulary,
                        connective_in: str = "hypothesis") -> PerplexityPrediction:
    """Pick the candidate whose analogy sentence has the lowest (pseudo-)perplexity.

    A scorer error marks that candidate +inf. Ties go to the lowest index; if
    every candidate is +inf the prediction is 0 and flagged degenerate.
    """
    scores = []
    for cand in question.candidates:
        premise, hypothesis = analogy_sentence(question.query, cand, connective_in)
        try:
            if scorer.kind == CONDITIONAL:
                score = ed_conditional_perplexity(scorer, vocab.encode(premise), vocab.encode(hypothesis))
            else:
                ids = vocab.encode(f"{premise} {hypothesis}")
                if scorer.kind == MASKED:
                    score = mlm_pseudo_perplexity(scorer, ids, vocab.mask_id)
                else:
                    score = clm_perplexity(scorer, ids)
        except (ValueError, KeyError, IndexError, FloatingPointError) as exc:
            logger.warning("scorer failed on candidate %s: %s", cand, exc)
            score = math.inf
        scores.append(score)
    arr = np.array(scores)
    degenerate = bool(np.all(np.isinf(arr)))
    return PerplexityPrediction(0 if degenerate else int(np.argmin(arr)), tuple(scores), degenerate)


class ConditionalAdapter:
    """Expose any causal or uniform scorer as a conditional one that sees the
    premise as a decoder prefix (premise tokens themselves are not scored)."""

    kind = CONDITIONAL

    def __init__(self, causal):
        self.causal = causal
        self.vocab_size = causal.vocab_size

    def decoder_logprobs(self, premise, prefix):
        return self.causal.next_token_logprobs(list(premise) + list(prefix))

