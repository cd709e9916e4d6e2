"""Analogy solving by cosine similarity and frozen-embedding relation classification."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import f1_score, precision_recall_fscore_support
from sklearn.neural_network import MLPClassifier

from .data import AnalogyQuestion, DataError, WordPair, _read_jsonl
from .encoder import DEFAULT_AGGREGATION, EncoderModel, embed_pairs

logger = logging.getLogger(__name__)

UNCATEGORIZED = "uncategorized"


class MissingEmbedding(KeyError):
    pass


class PairEmbedder(Protocol):
    def embed(self, pairs: Sequence[WordPair]) -> np.ndarray:
        """Return an (n, d) array, one row per pair."""


class EncoderEmbedder:
    """Relation embeddings from the bundled encoder under one template."""

    def __init__(self, model: EncoderModel, template, aggregation=DEFAULT_AGGREGATION):
        self.model = model
        self.template = template
        self.aggregation = aggregation

    def embed(self, pairs):
        return embed_pairs(self.model, self.template, list(pairs), self.aggregation)


class RandomEmbedder:
    """A fixed pseudo-random vector per pair, derived from the pair and the seed."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _vector(self, pair: WordPair) -> np.ndarray:
        key = f"{self.seed}\0{pair.head}\0{pair.tail}".encode("utf-8")
        digest = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
        return np.random.default_rng(digest).standard_normal(self.dim)

    def embed(self, pairs):
        return np.array([self._vector(p) for p in pairs]).reshape(len(pairs), self.dim)


class StoredEmbedder:
    """Look-up embedder over precomputed vectors (e.g. a loaded embedding store)."""

    def __init__(self, vectors: Mapping[WordPair, np.ndarray]):
        self.vectors = dict(vectors)
        dims = {np.shape(v) for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")

    def embed(self, pairs):
        missing = [p for p in pairs if p not in self.vectors]
        if missing:
            raise MissingEmbedding(f"{len(missing)} pairs have no stored embedding, e.g. {missing[0]}")
        return np.array([self.vectors[p] for p in pairs])


# ---------------------------------------------------------------------------
# analogy questions
# ---------------------------------------------------------------------------


def _cosine_scores(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    q_norm = np.linalg.norm(query)
    c_norm = np.linalg.norm(candidates, axis=1)
    scores = np.full(len(candidates), -np.inf)
    if q_norm == 0:
        logger.warning("zero-norm query embedding; every candidate scores -inf")
        return scores
    ok = c_norm > 0
    if not ok.all():
        logger.warning("%d zero-norm candidate embedding(s) scored -inf", int((~ok).sum()))
    scores[ok] = (candidates[ok] @ query) / (c_norm[ok] * q_norm)
    return scores


def _predict(vectors: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(_cosine_scores(vectors[0], vectors[1:])))


def solve_analogy(embedder: PairEmbedder, question: AnalogyQuestion) -> int:
    """Index of the candidate whose embedding is most cosine-similar to the query's."""
    vectors = np.asarray(embedder.embed([question.query, *question.candidates]), dtype=np.float64)
    return _predict(vectors)


@dataclass(frozen=True)
class QuestionResult:
    index: int
    predicted: int
    gold: int
    category: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.gold


@dataclass
class AccuracyReport:
    accuracy: float
    n: int
    per_category: dict[str, tuple[float, int]]
    predictions: list[QuestionResult] = field(repr=False)

    def csv_rows(self, dataset: str) -> list[tuple]:
        rows = [(dataset, "accuracy", self.accuracy, "")]
        if set(self.per_category) != {UNCATEGORIZED}:
            rows += [(dataset, "accuracy", acc, cat) for cat, (acc, _) in sorted(self.per_category.items())]
        return rows


def eval_analogy(embedder: PairEmbedder, questions: Sequence[AnalogyQuestion]) -> AccuracyReport:
    if not questions:
        raise ValueError("no questions")
    unique = list(dict.fromkeys(p for q in questions for p in (q.query, *q.candidates)))
    table = np.asarray(embedder.embed(unique), dtype=np.float64)
    row = {p: i for i, p in enumerate(unique)}
    results = []
    for i, q in enumerate(questions):
        vectors = table[[row[p] for p in (q.query, *q.candidates)]]
        results.append(QuestionResult(i, _predict(vectors), q.gold, q.category or UNCATEGORIZED))
    by_cat: dict[str, list[bool]] = defaultdict(list)
    for r in results:
        by_cat[r.category].append(r.correct)
    per_category = {c: (sum(v) / len(v), len(v)) for c, v in sorted(by_cat.items())}
    correct = sum(r.correct for r in results)
    return AccuracyReport(correct / len(results), len(results), per_category, results)


def predictions_to_jsonl(report: AccuracyReport) -> str:
    return "".join(
        json.dumps({"index": r.index, "predicted": r.predicted, "gold": r.gold,
                    "correct": r.correct, "category": r.category}) + "\n"
        for r in report.predictions
    )


# ---------------------------------------------------------------------------
# relation classification
# ---------------------------------------------------------------------------

LEARNING_RATES = (1e-3, 1e-4, 1e-5)
HIDDEN_SIZES = (100, 150, 200)
DEFAULT_HIDDEN, DEFAULT_LR = 100, 1e-3
MAX_EPOCHS = 200


@dataclass
class LabeledPairSet:
    entries: list[tuple[WordPair, str]]
    split: str = "train"

    def __post_init__(self):
        if not self.entries:
            raise DataError("empty labeled pair set")

    @property
    def pairs(self) -> list[WordPair]:
        return [p for p, _ in self.entries]

    @property
    def labels(self) -> list[str]:
        return [lab for _, lab in self.entries]


def load_labeled_pairs(path, split: str = "train") -> LabeledPairSet:
    """Read ``{"head", "tail", "label"}`` JSONL records."""
    entries = []
    for lineno, obj in _read_jsonl(path):
        try:
            entries.append((WordPair(obj["head"], obj["tail"]), str(obj["label"])))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
    return LabeledPairSet(entries, split)


def embed_labeled(embedder: PairEmbedder, pairset: LabeledPairSet):
    return np.asarray(embedder.embed(pairset.pairs), dtype=np.float64), np.array(pairset.labels)


@dataclass(frozen=True)
class GridCell:
    learning_rate: float
    hidden_size: int
    valid_micro_f1: float | None


@dataclass
class MlpClassifier:
    estimator: MLPClassifier
    learning_rate: float
    hidden_size: int
    input_dim: int
    grid: list[GridCell]
    used_default: bool

    @property
    def labels(self) -> list[str]:
        return list(self.estimator.classes_)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"classifier expects {self.input_dim}-dim inputs, got shape {X.shape}")
        return self.estimator.predict(X)


def _fit_mlp(X, y, hidden: int, lr: float, seed: int) -> MLPClassifier:
    clf = MLPClassifier(hidden_layer_sizes=(hidden,), activation="relu", solver="adam",
                        learning_rate_init=lr, max_iter=MAX_EPOCHS, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X, y)
    return clf


def train_relation_classifier(X_train, y_train, X_valid=None, y_valid=None,
                              learning_rates: Sequence[float] = LEARNING_RATES,
                              hidden_sizes: Sequence[int] = HIDDEN_SIZES,
                              seed: int = 0) -> MlpClassifier:
    """Grid-search a one-hidden-layer MLP on validation micro-F1.

    Without a validation split the default cell (100 hidden units, lr 1e-3)
    is fitted directly. Grid ties keep the first cell in (lr, hidden) order.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    if len(X_train) == 0:
        raise ValueError("empty training set")
    if len(set(y_train.tolist())) < 2:
        raise ValueError("training set has a single label")
    dim = X_train.shape[1]
    if X_valid is None or len(X_valid) == 0:
        clf = _fit_mlp(X_train, y_train, DEFAULT_HIDDEN, DEFAULT_LR, seed)
        return MlpClassifier(clf, DEFAULT_LR, DEFAULT_HIDDEN, dim, [GridCell(DEFAULT_LR, DEFAULT_HIDDEN, None)], True)
    X_valid = np.asarray(X_valid, dtype=np.float64)
    best, grid = None, []
    for lr in learning_rates:
        for hidden in hidden_sizes:
            clf = _fit_mlp(X_train, y_train, hidden, lr, seed)
            score = float(f1_score(y_valid, clf.predict(X_valid), average="micro"))
            grid.append(GridCell(lr, hidden, score))
            if best is None or score > best[0]:
                best = (score, clf, lr, hidden)
    _, clf, lr, hidden = best
    return MlpClassifier(clf, lr, hidden, dim, grid, False)


@dataclass
class F1Report:
    micro_f1: float
    macro_f1: float
    per_label: dict[str, float]
    n: int
    unseen_labels: list[str]

    def csv_rows(self, dataset: str) -> list[tuple]:
        rows = [(dataset, "micro_f1", self.micro_f1, ""), (dataset, "macro_f1", self.macro_f1, "")]
        rows += [(dataset, "f1", v, label) for label, v in sorted(self.per_label.items())]
        return rows


def f1_report(y_true, y_pred, known_labels: Sequence[str] | None = None) -> F1Report:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty test set")
    labels = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    unseen = sorted(set(y_true.tolist()) - set(known_labels)) if known_labels is not None else []
    if unseen:
        logger.warning("test labels unseen in training (always wrong): %s", unseen)
    _, _, f1, _ = precision_recall_fscore_support(y_true, y_pred, labels=labels, zero_division=0)
    micro = f1_score(y_true, y_pred, labels=labels, average="micro", zero_division=0)
    return F1Report(float(micro), float(np.mean(f1)), dict(zip(labels, map(float, f1))), len(y_true), unseen)


def eval_classifier(classifier: MlpClassifier, X_test, y_test) -> F1Report:
    return f1_report(y_test, classifier.predict(X_test), classifier.labels)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CSV_HEADER = ("dataset", "metric", "value", "category")


def rows_to_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for dataset, metric, value, category in rows:
        writer.writerow((dataset, metric, repr(float(value)), category))
    return buf.getvalue()


def rows_to_table(rows: Sequence[tuple]) -> str:
    lines = [f"{'dataset':<20} {'metric':<10} {'category':<24} {'value':>8}"]
    for dataset, metric, value, category in rows:
        lines.append(f"{dataset:<20} {metric:<10} {category or '-':<24} {100 * float(value):>7.1f}%")
    return "\n".join(lines) + "\n"


def write_csv(rows: Sequence[tuple], path) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")
