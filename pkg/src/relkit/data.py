"""Relational training and evaluation data.

Word pairs, relation datasets (positives/negatives per relation), rated pair
lists, KG triples and multiple-choice analogy questions, together with the
builders that turn raw resources into training sets and analogy benchmarks.

All builders are deterministic: relations are visited in sorted order, pair
collections are stored sorted, and every random choice comes from a
``random.Random`` seeded per call.
"""
from __future__ import annotations

import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Raised for malformed input files or violated dataset invariants."""


@dataclass(frozen=True, order=True)
class WordPair:
    head: str
    tail: str

    def __post_init__(self):
        if not isinstance(self.head, str) or not isinstance(self.tail, str):
            raise DataError(f"word pair components must be strings: {self.head!r}, {self.tail!r}")
        head, tail = self.head.strip(), self.tail.strip()
        if not head or not tail:
            raise DataError(f"empty word in pair ({self.head!r}, {self.tail!r})")
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "tail", tail)

    def reversed(self) -> "WordPair":
        return WordPair(self.tail, self.head)

    def as_list(self) -> list[str]:
        return [self.head, self.tail]

    @classmethod
    def from_obj(cls, obj) -> "WordPair":
        if not isinstance(obj, (list, tuple)) or len(obj) != 2:
            raise DataError(f"expected [head, tail], got {obj!r}")
        return cls(obj[0], obj[1])


def _sorted_unique(pairs: Iterable[WordPair]) -> tuple[WordPair, ...]:
    return tuple(sorted(set(pairs)))


@dataclass(frozen=True)
class Relation:
    """Positive and negative pairs of one relation, stored sorted and de-duplicated."""

    positives: tuple[WordPair, ...]
    negatives: tuple[WordPair, ...] = ()

    def __init__(self, positives: Iterable[WordPair], negatives: Iterable[WordPair] = ()):
        object.__setattr__(self, "positives", _sorted_unique(positives))
        object.__setattr__(self, "negatives", _sorted_unique(negatives))


@dataclass
class RelationDataset:
    relations: dict[str, Relation]
    split: str = "train"
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        self.validate()

    def validate(self) -> None:
        if not self.relations:
            raise DataError("no relations")
        for rid, rel in self.relations.items():
            if not rid:
                raise DataError("empty relation id")
            if not rel.positives:
                raise DataError(f"relation {rid!r} has no positives")
            overlap = set(rel.positives) & set(rel.negatives)
            if overlap:
                example = min(overlap)
                raise DataError(
                    f"relation {rid!r}: pair ({example.head}, {example.tail}) is both positive and negative"
                )

    def __len__(self) -> int:
        return len(self.relations)

    def relation_ids(self) -> list[str]:
        return list(self.relations)

    def mean_positives(self) -> float:
        return sum(len(r.positives) for r in self.relations.values()) / len(self.relations)

    def all_pairs(self) -> list[WordPair]:
        pairs = set()
        for rel in self.relations.values():
            pairs.update(rel.positives)
            pairs.update(rel.negatives)
        return sorted(pairs)

    def to_jsonl(self) -> str:
        lines = []
        for rid, rel in self.relations.items():
            record = {
                "relation": rid,
                "positives": [p.as_list() for p in rel.positives],
                "negatives": [p.as_list() for p in rel.negatives],
            }
            lines.append(json.dumps(record, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _read_jsonl(path) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            records.append((lineno, obj))
    return records


def load_relation_dataset(path, split: str = "train") -> RelationDataset:
    """Read a relation dataset from JSONL, one relation per line.

    Each record is ``{"relation": str, "positives": [[h, t], ...],
    "negatives": [[h, t], ...]}``; ``negatives`` may be omitted.
    """
    relations: dict[str, Relation] = {}
    for lineno, obj in _read_jsonl(path):
        try:
            rid = obj["relation"]
            positives = [WordPair.from_obj(p) for p in obj["positives"]]
            negatives = [WordPair.from_obj(p) for p in obj.get("negatives", [])]
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if not isinstance(rid, str):
            raise DataError(f"{path}:{lineno}: relation id must be a string")
        if rid in relations:
            raise DataError(f"{path}:{lineno}: duplicate relation {rid!r}")
        relations[rid] = Relation(positives, negatives)
    return RelationDataset(relations, split=split, metadata={"source": str(path)})


@dataclass(frozen=True)
class RatedPairList:
    relation: str
    entries: tuple[tuple[WordPair, float], ...]
    parent: str | None = None


def load_rated_lists(path) -> list[RatedPairList]:
    """Read ``{"relation", "parent", "entries": [[h, t, score], ...]}`` records."""
    lists = []
    for lineno, obj in _read_jsonl(path):
        try:
            entries = tuple((WordPair(h, t), float(s)) for h, t, s in obj["entries"])
            lists.append(RatedPairList(obj["relation"], entries, obj.get("parent")))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad rated list ({exc})") from None
    return lists


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not (self.head.strip() and self.relation.strip() and self.tail.strip()):
            raise DataError(f"triple has an empty field: {self!r}")


def load_triples(path) -> list[Triple]:
    """Read a headerless UTF-8 TSV of ``head<TAB>relation<TAB>tail`` lines."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    triples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                triples.append(Triple(*parts))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return triples


@dataclass(frozen=True)
class AnalogyQuestion:
    query: WordPair
    candidates: tuple[WordPair, ...]
    gold: int
    category: str | None = None

    def __post_init__(self):
        k = len(self.candidates)
        if k < 2:
            raise DataError("an analogy question needs at least 2 candidates")
        if not 0 <= self.gold < k:
            raise DataError(f"gold index {self.gold} out of range for {k} candidates")
        if len(set(self.candidates)) != k:
            raise DataError("duplicate candidates")
        if self.query in self.candidates:
            raise DataError("query pair appears among the candidates")

    @property
    def answer(self) -> WordPair:
        return self.candidates[self.gold]

    def to_dict(self) -> dict:
        return {
            "query": self.query.as_list(),
            "candidates": [c.as_list() for c in self.candidates],
            "gold": self.gold,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "AnalogyQuestion":
        return cls(
            WordPair.from_obj(obj["query"]),
            tuple(WordPair.from_obj(c) for c in obj["candidates"]),
            int(obj["gold"]),
            obj.get("category"),
        )


def questions_to_jsonl(questions: Sequence[AnalogyQuestion]) -> str:
    return "".join(json.dumps(q.to_dict(), ensure_ascii=False) + "\n" for q in questions)


def save_questions(questions: Sequence[AnalogyQuestion], path) -> None:
    Path(path).write_text(questions_to_jsonl(questions), encoding="utf-8")


def load_questions(path) -> list[AnalogyQuestion]:
    questions = []
    for lineno, obj in _read_jsonl(path):
        try:
            questions.append(AnalogyQuestion.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad analogy question ({exc})") from None
    if not questions:
        raise DataError(f"{path}: no questions")
    return questions


# ---------------------------------------------------------------------------
# RelSim-style construction from rated lists
# ---------------------------------------------------------------------------

N_PROTOTYPICAL = 10
MIN_RATED_ENTRIES = 20


def _split_pairs(pairs: Sequence[WordPair], ratio: float, rng: random.Random):
    shuffled = list(pairs)
    rng.shuffle(shuffled)
    n_train = int(round(ratio * len(shuffled)))
    return shuffled[:n_train], shuffled[n_train:]


def build_relsim(
    fine_grained: Sequence[RatedPairList],
    split_ratio: float = 0.8,
    seed: int = 0,
    parents: Iterable[str] | None = None,
) -> tuple[RelationDataset, RelationDataset]:
    """Build train/valid relation datasets from prototypicality-rated lists.

    Each fine-grained relation keeps its 10 highest-rated pairs as positives and
    its 10 lowest-rated as negatives. Each parent relation takes the union of
    its children's positives; its negatives are the positives of every other
    parent. The split is done per fine-grained relation, and parents inherit
    their children's split, so a pair never lands in different splits for a
    child and its parent.

    ``parents`` optionally declares the expected parent ids; a declared parent
    with no children is an error.
    """
    if not 0.0 < split_ratio < 1.0:
        raise DataError(f"split_ratio must be in (0, 1), got {split_ratio}")
    if not fine_grained:
        raise DataError("no rated lists")
    rng = random.Random(seed)

    children: dict[str, list[str]] = defaultdict(list)
    fine: dict[str, tuple[list[WordPair], list[WordPair]]] = {}
    for rated in sorted(fine_grained, key=lambda r: r.relation):
        if rated.relation in fine:
            raise DataError(f"duplicate fine-grained relation {rated.relation!r}")
        if rated.parent is None:
            raise DataError(f"relation {rated.relation!r} has no parent")
        seen: dict[WordPair, float] = {}
        for pair, score in rated.entries:
            seen.setdefault(pair, score)
        if len(seen) < MIN_RATED_ENTRIES:
            raise DataError(
                f"relation {rated.relation!r} has {len(seen)} rated pairs, need at least {MIN_RATED_ENTRIES}"
            )
        # one total ranking, ties broken lexicographically on (head, tail), so the
        # top and bottom ten never overlap
        ranked = [p for p, _ in sorted(seen.items(), key=lambda kv: (-kv[1], kv[0]))]
        top, bottom = ranked[:N_PROTOTYPICAL], ranked[-N_PROTOTYPICAL:]
        fine[rated.relation] = (sorted(top), sorted(bottom))
        children[rated.parent].append(rated.relation)

    for parent in parents or ():
        if parent not in children:
            raise DataError(f"parent relation {parent!r} has no children")
    clash = set(children) & set(fine)
    if clash:
        raise DataError(f"ids used both as parent and fine-grained relation: {sorted(clash)}")
    if len(children) == 1:
        logger.warning("only one parent relation: parent negatives will be empty")

    split_rel: dict[str, dict[str, Relation]] = {"train": {}, "valid": {}}
    parent_pos: dict[str, dict[str, set]] = {"train": defaultdict(set), "valid": defaultdict(set)}
    for rid, (top, bottom) in fine.items():
        pos_train, pos_valid = _split_pairs(top, split_ratio, rng)
        neg_train, neg_valid = _split_pairs(bottom, split_ratio, rng)
        split_rel["train"][rid] = Relation(pos_train, neg_train)
        split_rel["valid"][rid] = Relation(pos_valid, neg_valid)
    for parent in sorted(children):
        for child in children[parent]:
            for split in ("train", "valid"):
                parent_pos[split][parent].update(split_rel[split][child].positives)

    meta = {
        "source": "relsim",
        "seed": str(seed),
        "split_ratio": str(split_ratio),
        "n_fine_grained": str(len(fine)),
        "n_parents": str(len(children)),
    }
    out = []
    for split in ("train", "valid"):
        rels = dict(sorted(split_rel[split].items()))
        for parent in sorted(children):
            positives = parent_pos[split][parent]
            negatives = set()
            for other in children:
                if other != parent:
                    negatives |= parent_pos[split][other]
            rels[parent] = Relation(positives, negatives - positives)
        if any(not r.positives for r in rels.values()):
            empty = sorted(k for k, r in rels.items() if not r.positives)
            raise DataError(f"split {split!r} leaves relations without positives: {empty}")
        out.append(RelationDataset(rels, split=split, metadata=dict(meta)))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Knowledge-graph triples
# ---------------------------------------------------------------------------


def negatives_from_other_relations(positives: Mapping[str, Iterable[WordPair]]) -> dict[str, Relation]:
    """Give each relation the positives of all the other relations as negatives.

    Pairs that are also positives of the relation itself are left out so the
    positive and negative sets stay disjoint.
    """
    pos = {rid: set(p) for rid, p in positives.items()}
    everything = set().union(*pos.values()) if pos else set()
    return {rid: Relation(p, everything - p) for rid, p in sorted(pos.items())}


def build_from_triples(
    triples: Sequence[Triple],
    min_triples_per_relation: int = 3,
    min_entity_freq: int = 5,
    relation_merge: Mapping[str, str] | None = None,
    drop_relations: Iterable[str] = (),
    split: str = "train",
) -> RelationDataset:
    """Filter KG triples into a relation dataset.

    Order of operations: rename relations through ``relation_merge``, drop
    ``drop_relations`` (matched against original or merged name), count entity
    frequency over the remaining triples (head and tail occurrences jointly),
    drop triples with a rare entity, then drop relations left with fewer than
    ``min_triples_per_relation`` distinct pairs.
    """
    if min_triples_per_relation < 0 or min_entity_freq < 0:
        raise DataError("thresholds must be non-negative")
    merge = dict(relation_merge or {})
    drop = set(drop_relations)

    kept = []
    for tr in triples:
        rel = merge.get(tr.relation, tr.relation)
        if tr.relation in drop or rel in drop:
            continue
        kept.append((tr.head, rel, tr.tail))

    freq: Counter = Counter()
    for head, _, tail in kept:
        freq[head] += 1
        freq[tail] += 1
    kept = [t for t in kept if freq[t[0]] >= min_entity_freq and freq[t[2]] >= min_entity_freq]

    by_rel: dict[str, set[WordPair]] = defaultdict(set)
    for head, rel, tail in kept:
        by_rel[rel].add(WordPair(head, tail))
    by_rel = {r: p for r, p in by_rel.items() if len(p) >= min_triples_per_relation}
    if not by_rel:
        raise DataError("no relations left after filtering")

    meta = {
        "source": "triples",
        "min_triples_per_relation": str(min_triples_per_relation),
        "min_entity_freq": str(min_entity_freq),
        "n_input_triples": str(len(triples)),
        "n_kept_triples": str(sum(len(p) for p in by_rel.values())),
    }
    return RelationDataset(negatives_from_other_relations(by_rel), split=split, metadata=meta)


# ---------------------------------------------------------------------------
# Analogy question builders
# ---------------------------------------------------------------------------


def to_analogy_questions(dataset: RelationDataset, n_negatives: int = 1, seed: int = 0) -> list[AnalogyQuestion]:
    """Turn a relation dataset into multiple-choice analogy questions.

    Every positive pair of a relation serves once as the query; the answer is
    another positive of the same relation. Negatives are ``n_negatives`` pairs
    from each other relation plus the answer reversed, so each question has
    ``(|R| - 1) * n_negatives + 2`` candidates when the other relations are
    large enough. The relation id is stored as the question category.
    """
    if n_negatives < 1:
        raise DataError("n_negatives must be >= 1")
    rng = random.Random(seed)
    rel_ids = list(dataset.relations)
    questions = []
    for rid in rel_ids:
        positives = list(dataset.relations[rid].positives)
        if len(positives) < 2:
            logger.warning("relation %r has fewer than 2 positives; skipped", rid)
            continue
        own = set(positives)
        for query in positives:
            answers = [p for p in positives if p != query and p.reversed() != query]
            if not answers:
                logger.warning("relation %r: no usable answer for query %s", rid, query)
                continue
            gold = rng.choice(answers)
            reverse = gold.reversed()
            taken = {query, gold, reverse}
            negatives = [reverse]
            for other in rel_ids:
                if other == rid:
                    continue
                pool = [p for p in dataset.relations[other].positives if p not in taken and p not in own]
                picked = rng.sample(pool, min(n_negatives, len(pool)))
                if len(picked) < n_negatives:
                    logger.warning("relation %r offers only %d negatives", other, len(picked))
                negatives.extend(picked)
                taken.update(picked)
            candidates = [gold] + negatives
            rng.shuffle(candidates)
            questions.append(AnalogyQuestion(query, tuple(candidates), candidates.index(gold), rid))
    return questions


def build_offset_questions(
    groups: Mapping[str, Mapping[str, Sequence[WordPair]]], seed: int = 0
) -> list[AnalogyQuestion]:
    """Build 4-choice questions from categorised relation lists (Google/BATS style).

    For each query pair the answer is another pair of the same relation, and the
    three distractors are: two heads of the relation paired together, two tails
    of the relation paired together, and a pair from a different relation of the
    same category.
    """
    rng = random.Random(seed)
    questions = []
    for category in sorted(groups):
        relations = {r: list(dict.fromkeys(ps)) for r, ps in sorted(groups[category].items())}
        if len(relations) < 2:
            raise DataError(f"category {category!r} needs at least 2 relations")
        for rid, pairs in relations.items():
            if len(pairs) < 3:
                raise DataError(f"relation {rid!r} in {category!r} needs at least 3 pairs")
            heads = sorted({p.head for p in pairs})
            tails = sorted({p.tail for p in pairs})
            if len(heads) < 2 or len(tails) < 2:
                raise DataError(f"relation {rid!r} needs at least 2 distinct heads and tails")
            others = [p for r, ps in relations.items() if r != rid for p in ps]
            for query in pairs:
                answer = rng.choice([p for p in pairs if p != query])
                used = {query, answer}
                head_pair = _word_pair_from(heads, query.head, used, rng)
                used.add(head_pair)
                tail_pair = _word_pair_from(tails, query.tail, used, rng)
                used.add(tail_pair)
                pool = [p for p in others if p not in used]
                if not pool:
                    raise DataError(f"no cross-relation distractor available for {query}")
                cross = rng.choice(pool)
                candidates = [answer, head_pair, tail_pair, cross]
                rng.shuffle(candidates)
                questions.append(AnalogyQuestion(query, tuple(candidates), candidates.index(answer), category))
    return questions


def _word_pair_from(words: list[str], avoid: str, used: set, rng: random.Random) -> WordPair:
    preferred = [w for w in words if w != avoid]
    pool = preferred if len(preferred) >= 2 else words
    for _ in range(8):
        a, b = rng.sample(pool, 2)
        if WordPair(a, b) not in used:
            return WordPair(a, b)
    options = [WordPair(a, b) for a in pool for b in pool if a != b]
    options = [p for p in options if p not in used]
    if not options:
        raise DataError(f"cannot form a distinct distractor from {words}")
    return rng.choice(options)
