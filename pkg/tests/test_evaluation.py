import csv
import io
import json
import logging
import random

import numpy as np
import pytest

import relkit.evaluation as evaluation
from conftest import make_questions
from oracles import binomial_interval, micro_f1_from_confusion
from relkit.data import AnalogyQuestion, DataError, WordPair
from relkit.evaluation import (
    LabeledPairSet,
    RandomEmbedder,
    StoredEmbedder,
    UNCATEGORIZED,
    embed_labeled,
    eval_analogy,
    eval_classifier,
    f1_report,
    load_labeled_pairs,
    predictions_to_jsonl,
    rows_to_csv,
    rows_to_table,
    solve_analogy,
    train_relation_classifier,
)


def question(k=4, gold=0):
    return AnalogyQuestion(WordPair("a", "b"), tuple(WordPair(f"c{i}", f"d{i}") for i in range(k)), gold)


def stored(q, vectors):
    return StoredEmbedder(dict(zip((q.query, *q.candidates), map(np.asarray, vectors))))


# ---------------------------------------------------------------------------
# analogy solving
# ---------------------------------------------------------------------------


def test_identical_candidate_wins():
    q = question(4)
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((5, 6))
    vecs[3] = vecs[0]  # candidate 2
    assert solve_analogy(stored(q, vecs), q) == 2


def test_orthogonal_candidates_tie_to_first():
    q = question(3)
    vecs = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
    assert solve_analogy(stored(q, vecs), q) == 0


def test_zero_norm_candidate_never_wins(caplog):
    q = question(2)
    with caplog.at_level(logging.WARNING):
        assert solve_analogy(stored(q, [[1, 0], [0, 0], [-1, 0.1]]), q) == 1
    assert "zero-norm" in caplog.text


def test_zero_norm_query_predicts_first():
    q = question(3)
    assert solve_analogy(stored(q, [[0, 0], [1, 0], [0, 1], [1, 1]]), q) == 0


@pytest.mark.parametrize("seed", range(5))
def test_prediction_invariant_to_scale_and_rotation(seed):
    rng = np.random.default_rng(seed)
    q = question(6)
    vecs = rng.standard_normal((7, 5))
    rot, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    base = solve_analogy(stored(q, vecs), q)
    assert solve_analogy(stored(q, 3.0 * vecs), q) == base
    assert solve_analogy(stored(q, vecs @ rot.T), q) == base


def test_oracle_embedder_scores_perfectly():
    qs = make_questions(40, 5, seed=1)
    rng = np.random.default_rng(1)
    table = {}
    for q in qs:
        for c in q.candidates:
            table[c] = rng.standard_normal(8)
        table[q.query] = table[q.answer]
    assert eval_analogy(StoredEmbedder(table), qs).accuracy == 1.0


@pytest.mark.parametrize("k", [4, 5])
def test_random_embedder_near_chance(k):
    qs = make_questions(1000, k, seed=k)
    report = eval_analogy(RandomEmbedder(64, seed=0), qs)
    lo, hi = binomial_interval(1000, 1 / k)
    assert lo <= report.accuracy <= hi


def test_accuracy_recomputed_from_predictions():
    qs = make_questions(60, 4, seed=2, categories=["x", "y", "z"])
    report = eval_analogy(RandomEmbedder(16, seed=3), qs)
    assert report.accuracy == sum(r.correct for r in report.predictions) / len(qs)
    for cat in "xyz":
        hits = [r.correct for r in report.predictions if r.category == cat]
        assert report.per_category[cat] == (sum(hits) / len(hits), len(hits))
    lines = [json.loads(line) for line in predictions_to_jsonl(report).splitlines()]
    assert [d["predicted"] for d in lines] == [r.predicted for r in report.predictions]


def test_eval_matches_per_question_solver():
    qs = make_questions(30, 5, seed=4)
    emb = RandomEmbedder(8, seed=1)
    report = eval_analogy(emb, qs)
    assert [r.predicted for r in report.predictions] == [solve_analogy(emb, q) for q in qs]


def test_random_embedder_is_deterministic():
    pairs = [WordPair("a", "b"), WordPair("c", "d")]
    np.testing.assert_array_equal(RandomEmbedder(8, 5).embed(pairs), RandomEmbedder(8, 5).embed(pairs[:1] + pairs[1:]))
    assert not np.array_equal(RandomEmbedder(8, 5).embed(pairs), RandomEmbedder(8, 6).embed(pairs))


def test_uncategorized_rows():
    qs = make_questions(10, 4)
    report = eval_analogy(RandomEmbedder(8), qs)
    assert set(report.per_category) == {UNCATEGORIZED}
    assert report.csv_rows("toy") == [("toy", "accuracy", report.accuracy, "")]


def test_csv_rows_per_category():
    qs = make_questions(12, 4, categories=["a", "b"])
    rows = eval_analogy(RandomEmbedder(8), qs).csv_rows("toy")
    assert len(rows) == 3
    parsed = list(csv.reader(io.StringIO(rows_to_csv(rows))))
    assert parsed[0] == ["dataset", "metric", "value", "category"]
    assert [r[3] for r in parsed[1:]] == ["", "a", "b"]
    assert rows_to_table(rows).count("\n") == 4


def test_empty_questions_rejected():
    with pytest.raises(ValueError):
        eval_analogy(RandomEmbedder(8), [])


def test_stored_embedder_errors():
    with pytest.raises(ValueError):
        StoredEmbedder({WordPair("a", "b"): np.zeros(2), WordPair("c", "d"): np.zeros(3)})
    with pytest.raises(KeyError):
        StoredEmbedder({WordPair("a", "b"): np.zeros(2)}).embed([WordPair("x", "y")])


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def blobs(n, d=8, seed=0, sep=6.0):
    rng = np.random.default_rng(seed)
    y = np.array(["A", "B"] * (n // 2))
    centers = {"A": np.full(d, -sep / 2), "B": np.full(d, sep / 2)}
    X = np.array([centers[v] for v in y]) + rng.standard_normal((n, d))
    return X, y


def linear_probe_separates(X, y) -> bool:
    # least-squares hyperplane; separability means every sign agrees
    target = np.where(y == "B", 1.0, -1.0)
    A = np.hstack([X, np.ones((len(X), 1))])
    w, *_ = np.linalg.lstsq(A, target, rcond=None)
    return bool(np.all(np.sign(A @ w) == target))


@pytest.fixture
def count_fits(monkeypatch):
    calls = []
    real = evaluation._fit_mlp

    def spy(X, y, hidden, lr, seed):
        calls.append((lr, hidden))
        return real(X, y, hidden, lr, seed)

    monkeypatch.setattr(evaluation, "_fit_mlp", spy)
    return calls


def test_grid_runs_nine_fits(count_fits):
    X, y = blobs(40, seed=1)
    Xv, yv = blobs(20, seed=2)
    clf = train_relation_classifier(X, y, Xv, yv)
    assert sorted(count_fits) == sorted((lr, h) for lr in (1e-3, 1e-4, 1e-5) for h in (100, 150, 200))
    assert len(clf.grid) == 9 and not clf.used_default


def test_no_validation_uses_default_cell(count_fits):
    X, y = blobs(30)
    clf = train_relation_classifier(X, y)
    assert count_fits == [(1e-3, 100)]
    assert (clf.hidden_size, clf.learning_rate, clf.used_default) == (100, 1e-3, True)


def test_separable_blobs():
    X, y = blobs(200, seed=0)
    Xt, yt = blobs(200, seed=9)
    assert linear_probe_separates(X, y)
    clf = train_relation_classifier(X, y)
    assert eval_classifier(clf, X, y).micro_f1 == 1.0
    assert eval_classifier(clf, Xt, yt).micro_f1 >= 0.99


def test_classifier_is_deterministic():
    X, y = blobs(40, seed=3)
    Xv, yv = blobs(20, seed=4)
    a = train_relation_classifier(X, y, Xv, yv, seed=7)
    b = train_relation_classifier(X, y, Xv, yv, seed=7)
    assert (a.learning_rate, a.hidden_size) == (b.learning_rate, b.hidden_size)
    np.testing.assert_array_equal(a.predict(Xv), b.predict(Xv))


def test_classifier_input_errors():
    X, y = blobs(10)
    with pytest.raises(ValueError):
        train_relation_classifier(X, np.array(["A"] * 10))
    with pytest.raises(ValueError):
        train_relation_classifier(np.zeros((0, 8)), np.array([]))
    clf = train_relation_classifier(X, y)
    with pytest.raises(ValueError, match="8-dim"):
        clf.predict(np.zeros((2, 5)))


def test_f1_all_correct():
    r = f1_report(["a", "b", "c"], ["a", "b", "c"])
    assert r.micro_f1 == r.macro_f1 == 1.0


def test_f1_constant_prediction():
    assert f1_report(["A", "A", "B", "B"], ["A"] * 4).micro_f1 == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_micro_f1_matches_confusion_oracle(seed):
    rng = random.Random(seed)
    truth = [rng.choice("xyz") for _ in range(50)]
    pred = [rng.choice("xyz") for _ in range(50)]
    r = f1_report(truth, pred)
    assert abs(r.micro_f1 - micro_f1_from_confusion(truth, pred)) <= 1e-12
    # single-label micro-F1 is plain accuracy
    assert abs(r.micro_f1 - sum(a == b for a, b in zip(truth, pred)) / 50) <= 1e-12


def test_unseen_test_label_warns(caplog):
    with caplog.at_level(logging.WARNING):
        r = f1_report(["a", "q"], ["a", "a"], known_labels=["a", "b"])
    assert r.unseen_labels == ["q"] and r.per_label["q"] == 0.0
    assert "unseen" in caplog.text


def test_f1_rows():
    r = f1_report(["a", "b"], ["a", "b"])
    assert [row[1] for row in r.csv_rows("d")] == ["micro_f1", "macro_f1", "f1", "f1"]


def test_labeled_pairs_io(tmp_path):
    path = tmp_path / "l.jsonl"
    path.write_text('{"head": "a", "tail": "b", "label": "hyp"}\n{"head": "c", "tail": "d", "label": "mero"}\n')
    ps = load_labeled_pairs(path)
    assert ps.labels == ["hyp", "mero"] and ps.pairs[1] == WordPair("c", "d")
    X, y = embed_labeled(RandomEmbedder(4), ps)
    assert X.shape == (2, 4) and list(y) == ["hyp", "mero"]
    bad = tmp_path / "b.jsonl"
    bad.write_text('{"head": "a", "tail": "b"}\n')
    with pytest.raises(DataError):
        load_labeled_pairs(bad)
    with pytest.raises(DataError):
        LabeledPairSet([])
