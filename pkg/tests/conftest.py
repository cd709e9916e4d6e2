import random

import numpy as np
import pytest

from relkit.data import AnalogyQuestion, RatedPairList, Relation, RelationDataset, WordPair
from relkit.encoder import EncoderConfig, EncoderModel, build_vocab
from relkit.prompting import builtin_templates


def make_rated_lists(n_fine=79, n_parents=10, n_entries=25, seed=0) -> list[RatedPairList]:
    """Synthetic prototypicality-rated lists with words unique to each relation."""
    rng = random.Random(seed)
    lists = []
    for i in range(n_fine):
        entries = tuple(
            (WordPair(f"f{i}h{j}", f"f{i}t{j}"), round(rng.uniform(-50, 50), 1)) for j in range(n_entries)
        )
        lists.append(RatedPairList(f"fine{i:02d}", entries, f"parent{i % n_parents}"))
    return lists


def make_relation_dataset(n_relations=5, n_pos=6, split="train") -> RelationDataset:
    rels = {}
    for r in range(n_relations):
        pos = [WordPair(f"r{r}h{i}", f"r{r}t{i}") for i in range(n_pos)]
        rels[f"rel{r}"] = Relation(pos, [])
    return RelationDataset(rels, split=split)


def small_model(words=(), d_model=16, n_heads=2, n_layers=2, d_ff=32, max_len=32, seed=0) -> EncoderModel:
    corpus = [t.text for t in builtin_templates()] + list(words)
    vocab = build_vocab(corpus)
    cfg = EncoderConfig(len(vocab), d_model=d_model, n_heads=n_heads, n_layers=n_layers, d_ff=d_ff, max_len=max_len)
    return EncoderModel(cfg, vocab, seed=seed)


@pytest.fixture
def rated_lists():
    return make_rated_lists()


@pytest.fixture
def relation_dataset():
    return make_relation_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_questions(n: int, k: int, seed: int = 0, categories=None) -> list[AnalogyQuestion]:
    """n synthetic k-choice questions over fresh words; the gold index is uniform."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        query = WordPair(f"q{i}a", f"q{i}b")
        cands = tuple(WordPair(f"q{i}c{j}", f"q{i}d{j}") for j in range(k))
        cat = categories[i % len(categories)] if categories else None
        out.append(AnalogyQuestion(query, cands, rng.randrange(k), cat))
    return out
