import sys
from itertools import product
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import f1_score, roc_auc_score

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from mtram.errors import MetricError, ShapeError
from mtram.metrics import (
    PredictionSet,
    binary_auc,
    evaluate,
    micro_macro_auc,
    micro_macro_f1,
    per_label_f1,
    precision_at_k,
    prefixed,
)


@pytest.fixture()
def random_set() -> PredictionSet:
    """40 篇文档 × 6 个标签，保证每个标签正负例都存在"""
    rng = np.random.default_rng(0)
    labels = (rng.random((40, 6)) < 0.4).astype(float)
    labels[0] = 1.0
    labels[1] = 0.0
    scores = np.clip(0.35 * labels + rng.random((40, 6)) * 0.65, 0.0, 1.0)
    return PredictionSet(scores, labels)


def _pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    credit = 0.0
    for p, n in product(pos, neg):
        credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


# ---------- F1 ----------


def test_f1_worked_example():
    scores = np.array([[0.9, 0.9, 0.1], [0.1, 0.1, 0.9]])
    labels = np.array([[1, 0, 0], [0, 1, 1]])
    pred = PredictionSet(scores, labels)
    micro, macro = micro_macro_f1(pred)
    assert micro == pytest.approx(2 / 3)
    assert macro == pytest.approx(2 / 3)
    assert per_label_f1(pred).tolist() == [1.0, 0.0, 1.0]


def test_f1_perfect_and_all_negative():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    assert micro_macro_f1(PredictionSet(labels * 0.8 + 0.1, labels)) == (1.0, 1.0)
    assert micro_macro_f1(PredictionSet(np.full(labels.shape, 0.2), labels)) == (0.0, 0.0)


def test_f1_zero_over_zero_counts_as_zero_in_macro():
    labels = np.array([[1, 0], [1, 0]])
    micro, macro = micro_macro_f1(PredictionSet(np.array([[0.9, 0.1], [0.8, 0.2]]), labels))
    assert micro == 1.0
    assert macro == 0.5


def test_f1_matches_sklearn(random_set):
    y_hat = (random_set.scores >= 0.5).astype(int)
    micro, macro = micro_macro_f1(random_set)
    assert micro == pytest.approx(f1_score(random_set.labels, y_hat, average="micro", zero_division=0), abs=1e-12)
    assert macro == pytest.approx(f1_score(random_set.labels, y_hat, average="macro", zero_division=0), abs=1e-12)


def test_f1_single_label_equals_binary_f1():
    rng = np.random.default_rng(5)
    y = (rng.random(30) < 0.5).astype(float)
    s = rng.random(30)
    micro, _ = micro_macro_f1(PredictionSet(s[:, None], y[:, None]))
    assert micro == pytest.approx(f1_score(y, (s >= 0.5).astype(int)), abs=1e-12)


def test_f1_custom_threshold():
    pred = PredictionSet(np.array([[0.3], [0.6]]), np.array([[1], [1]]), threshold=0.25)
    assert micro_macro_f1(pred) == (1.0, 1.0)
    assert micro_macro_f1(pred, threshold=0.5)[0] == pytest.approx(2 / 3)


def test_f1_errors():
    with pytest.raises(MetricError):
        micro_macro_f1(PredictionSet(np.zeros((0, 3)), np.zeros((0, 3))))
    with pytest.raises(ValueError):
        micro_macro_f1(PredictionSet(np.zeros((1, 2)), np.zeros((1, 2))), threshold=1.0)


def test_prediction_set_validation():
    with pytest.raises(ShapeError):
        PredictionSet(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((1, 2)), np.array([[0, 2]]))
    with pytest.raises(ValueError):
        PredictionSet(np.array([[np.nan, 0.1]]), np.array([[0, 1]]))


# ---------- AUC ----------


def test_auc_examples():
    assert binary_auc(np.array([0.9, 0.2, 0.6]), np.array([1, 0, 1])) == 1.0
    assert binary_auc(np.full(4, 0.3), np.array([1, 0, 1, 0])) == 0.5
    assert binary_auc(np.array([0.1, 0.2]), np.array([1, 1])) is None


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        labels = (rng.random(n) < 0.5).astype(float)
        labels[0], labels[1] = 1.0, 0.0
        # 取少量离散值制造并列
        scores = rng.integers(0, 6, size=n) / 5.0
        assert abs(binary_auc(scores, labels) - _pairwise_auc(scores, labels)) <= 1e-12


def test_auc_matches_sklearn(random_set):
    micro, macro, skipped = micro_macro_auc(random_set)
    assert skipped == 0
    assert micro == pytest.approx(roc_auc_score(random_set.labels, random_set.scores, average="micro"), abs=1e-12)
    assert macro == pytest.approx(roc_auc_score(random_set.labels, random_set.scores, average="macro"), abs=1e-12)


def test_macro_auc_skips_degenerate_labels(caplog):
    scores = np.array([[0.9, 0.5], [0.1, 0.4], [0.7, 0.6]])
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    with caplog.at_level("WARNING"):
        micro, macro, skipped = micro_macro_auc(PredictionSet(scores, labels))
    assert skipped == 1
    assert macro == 1.0
    assert 0.0 <= micro <= 1.0
    assert "跳过" in caplog.text

    with pytest.raises(MetricError):
        micro_macro_auc(PredictionSet(scores, np.zeros_like(labels)))


def test_macro_equals_micro_for_identical_columns():
    rng = np.random.default_rng(2)
    s = rng.random(25)
    y = (rng.random(25) < 0.5).astype(float)
    y[:2] = (1.0, 0.0)
    micro, macro, _ = micro_macro_auc(PredictionSet(np.tile(s[:, None], (1, 4)), np.tile(y[:, None], (1, 4))))
    assert micro == pytest.approx(macro, abs=1e-12)


# ---------- P@k ----------


def test_precision_at_k_examples():
    pred = PredictionSet(np.array([[0.9, 0.8, 0.1]]), np.array([[1, 0, 0]]))
    assert precision_at_k(pred, 2) == 0.5
    exact = PredictionSet(np.array([[0.9, 0.8, 0.1]]), np.array([[1, 1, 0]]))
    assert precision_at_k(exact, 2) == 1.0
    empty_gold = PredictionSet(np.array([[0.9, 0.8, 0.1], [0.2, 0.3, 0.4]]), np.array([[1, 0, 0], [0, 0, 0]]))
    assert precision_at_k(empty_gold, 1) == 0.5


def test_precision_at_k_ties_prefer_lower_index():
    tied = np.full((1, 3), 0.5)
    assert precision_at_k(PredictionSet(tied, np.array([[1, 0, 0]])), 1) == 1.0
    assert precision_at_k(PredictionSet(tied, np.array([[0, 0, 1]])), 1) == 0.0


def test_precision_at_k_errors():
    pred = PredictionSet(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(MetricError):
        precision_at_k(pred, 4)
    with pytest.raises(ValueError):
        precision_at_k(pred, 0)


# ---------- 不变性 ----------


def test_rank_metrics_invariant_under_increasing_transforms(random_set):
    base_auc = micro_macro_auc(random_set)
    base_p = precision_at_k(random_set, 3)
    for transform in (lambda x: 2 * x + 1, lambda x: 1.0 / (1.0 + np.exp(-x))):
        moved = PredictionSet(transform(random_set.scores), random_set.labels)
        assert micro_macro_auc(moved) == base_auc
        assert precision_at_k(moved, 3) == base_p


def test_metrics_invariant_under_document_permutation(random_set):
    perm = np.random.default_rng(1).permutation(random_set.n_docs)
    shuffled = PredictionSet(random_set.scores[perm], random_set.labels[perm])
    a = evaluate(random_set, k=3).metric_values()
    b = evaluate(shuffled, k=3).metric_values()
    for name in a:
        assert a[name] == pytest.approx(b[name], abs=1e-12), name


# ---------- 报告 ----------


def test_evaluate_report(random_set):
    report = evaluate(random_set, k=3, task="fine", seed=4, config_hash="abc123def456")
    values = report.metric_values()
    assert set(values) == {"macro_auc", "micro_auc", "macro_f1", "micro_f1", "p_at_k"}
    assert all(0.0 <= v <= 1.0 for v in values.values())
    assert report.k == 3 and report.task == "fine" and report.seed == 4
    assert report.as_percent()["micro_f1"] == f"{report.micro_f1 * 100:.1f}"
    assert set(prefixed(report, "fine")) == {f"fine.{name}" for name in values}
