import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pituning.metrics import (
    MetricsReport,
    confusion_counts,
    macro_precision,
    macro_recall,
    mean_report,
    ndcg_at_k,
    per_class_recall,
    report_from_scores,
    weighted_precision,
    weighted_recall,
)

from oracles import brute_metrics, brute_ndcg


def test_hand_counted_example():
    c = confusion_counts([0, 0, 1], [0, 1, 1], 2)
    assert weighted_precision(c) == pytest.approx(2 / 3, abs=1e-12)
    assert macro_precision(c) == pytest.approx(0.75, abs=1e-12)
    assert weighted_recall(c) == pytest.approx(2 / 3, abs=1e-12)
    assert macro_recall(c) == pytest.approx(0.75, abs=1e-12)


def test_all_correct():
    c = confusion_counts([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert weighted_precision(c) == weighted_recall(c) == macro_precision(c) == macro_recall(c) == 1.0


def test_absent_class_counts_zero_in_macro():
    c = confusion_counts([0, 1], [0, 1], 4)
    assert macro_precision(c) == pytest.approx(0.5)
    assert macro_recall(c) == pytest.approx(0.5)


def test_restricted_weighted_precision():
    c = confusion_counts([0, 0, 1, 2], [0, 1, 1, 2], 3)
    assert weighted_precision(c, {1, 2}) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        weighted_precision(confusion_counts([0], [0], 3), {2})


def test_length_mismatch():
    with pytest.raises(ValueError):
        confusion_counts([0, 1], [0], 2)


def test_ndcg_position_two():
    scores = np.array([[0.9, 0.5, 0.1]])
    assert ndcg_at_k(scores, [1], 3) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_k(scores, [0], 3) == 1.0
    assert ndcg_at_k(scores, [2], 2) == 0.0


def test_ndcg_k_clamped_and_rankings():
    rankings = np.array([[2, 0, 1]])
    assert ndcg_at_k(rankings, [1], 10) == pytest.approx(0.5)


def test_ndcg_ties_lower_index_first():
    assert ndcg_at_k(np.zeros((1, 4)), [0], 1) == 1.0
    assert ndcg_at_k(np.zeros((1, 4)), [1], 1) == 0.0


def test_empty_evaluation():
    with pytest.raises(ValueError):
        report_from_scores(np.zeros((0, 3)), [], 3)


@given(st.integers(1, 10), st.integers(1, 60), st.integers(0, 2**31 - 1))
@settings(max_examples=150, deadline=None)
def test_matches_brute_force(n_classes, n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.random((n, n_classes))
    scores[rng.random((n, n_classes)) < 0.2] = 0.5  # force some ties
    true = rng.integers(0, n_classes, n)
    rep = report_from_scores(scores, true, n_classes, ks=(1, 3, 5))
    ref = brute_metrics(scores.argmax(1).tolist(), true.tolist(), n_classes)
    for key, val in ref.items():
        assert getattr(rep, key) == pytest.approx(val, abs=1e-9)
    for k in (1, 3, 5):
        assert rep.ndcg[k] == pytest.approx(brute_ndcg(scores.tolist(), true.tolist(), k), abs=1e-9)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
@settings(max_examples=50, deadline=None)
def test_weighted_precision_equals_accuracy(labels):
    rng = np.random.default_rng(len(labels))
    pred = rng.integers(0, 5, len(labels))
    c = confusion_counts(pred, labels, 5)
    assert weighted_precision(c) == pytest.approx(np.mean(pred == np.array(labels)))
    assert 0.0 <= per_class_recall(c).min() <= per_class_recall(c).max() <= 1.0


def test_mean_report():
    a = MetricsReport(1.0, 1.0, 1.0, 1.0, {3: 1.0})
    b = MetricsReport(0.0, 0.5, 0.0, 0.5, {3: 0.0})
    assert mean_report([a, b]) == {"prec_w": 0.5, "rec_w": 0.75, "prec_m": 0.5, "rec_m": 0.75, "ndcg@3": 0.5}
    assert "prec_w: 1.000000" in a.to_text()
