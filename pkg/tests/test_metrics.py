import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnguide.errors import InvalidArgumentError
from attnguide.metrics import (
    classification_metrics, first_relevant_rank, mrr, rank_candidates, ranking_metrics,
    recall_at_k, paired_t_test,
)
from oracles import hand_t


def test_classification_perfect():
    r = classification_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_classification_binary_hand_confusion():
    # TP=2 FP=1 FN=1 TN=2 for class 1
    labels = [1, 1, 1, 0, 0, 0]
    preds = [1, 1, 0, 1, 0, 0]
    r = classification_metrics(preds, labels, 2)
    # class 1: P = 2/3, R = 2/3; class 0: P = 2/3, R = 2/3
    assert abs(r.precision - 2 / 3) < 1e-12
    assert abs(r.recall - 2 / 3) < 1e-12
    assert abs(r.f1 - 2 / 3) < 1e-12
    assert abs(r.accuracy - 4 / 6) < 1e-12


def test_classification_single_class_predictions():
    r = classification_metrics([0] * 6, [0, 1, 2, 0, 1, 2], 3)
    assert abs(r.accuracy - 1 / 3) < 1e-12
    # class 0: P = 1/3, R = 1; others 0 -> macro P = 1/9, macro R = 1/3, F1 = (1/2)/3
    assert abs(r.precision - 1 / 9) < 1e-12
    assert abs(r.recall - 1 / 3) < 1e-12
    assert abs(r.f1 - 1 / 6) < 1e-12


def test_classification_errors():
    with pytest.raises(InvalidArgumentError):
        classification_metrics([0, 1], [0], 2)
    with pytest.raises(InvalidArgumentError):
        classification_metrics([0, 3], [0, 1], 3)


def test_mrr_cases():
    assert mrr([1, 1, 1]) == 1.0
    assert abs(mrr([1, 2, 4]) - (1 + 0.5 + 0.25) / 3) < 1e-15
    for r in (1, 3, 7):
        assert mrr([r]) == 1 / r
    with pytest.raises(InvalidArgumentError):
        mrr([0])


def test_recall_at_k_cases():
    lists = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1]]
    assert recall_at_k([[1, 0], [1, 0]], 1) == 1.0
    assert abs(recall_at_k(lists, 3) - 2 / 3) < 1e-15
    assert recall_at_k(lists, 20) == 1.0
    with pytest.raises(InvalidArgumentError):
        recall_at_k(lists, 0)


def test_ranking_pipeline():
    assert rank_candidates([0.2, 0.9, 0.2], [0, 0, 1]) == [0, 0, 1]    # stable ties
    assert first_relevant_rank([0, 0, 1]) == 3
    rep = ranking_metrics([([0.9, 0.1], [1, 0]), ([0.3, 0.6, 0.1], [1, 0, 0])], ks=(1, 3))
    assert abs(rep.mrr - 0.75) < 1e-15
    assert rep.to_dict() == {"mrr": 0.75, "r@1": 0.5, "r@3": 1.0}
    single = ranking_metrics([([0.4], [1]), ([0.2], [1])])
    assert single.mrr == 1.0


def test_t_test_degenerate_and_symmetry():
    assert paired_t_test([0.7, 0.8, 0.9], [0.7, 0.8, 0.9]) == (0.0, 1.0)
    a = [0.71, 0.74, 0.69, 0.80, 0.77]
    b = [0.70, 0.70, 0.72, 0.75, 0.71]
    t1, p1 = paired_t_test(a, b)
    t2, p2 = paired_t_test(b, a)
    assert t1 == -t2 and abs(p1 - p2) < 1e-15
    t, p = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert t == math.inf and p == 0.0


def test_t_test_textbook_sample():
    a = [2.0, 4.0, 6.0, 8.0, 10.0]
    b = [1.0, 2.0, 3.0, 4.0, 5.0]
    t, p = paired_t_test(a, b)
    # d = 1..5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5) / sqrt(5)) = 3 sqrt(2)
    assert abs(t - 3 * math.sqrt(2)) < 1e-12
    assert abs(t - hand_t(a, b)) < 1e-12
    stats = pytest.importorskip("scipy.stats")
    ref = stats.ttest_rel(a, b)
    assert abs(t - ref.statistic) < 1e-9 and abs(p - ref.pvalue) < 1e-9


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=12))
def test_t_test_matches_scipy(pairs):
    stats = pytest.importorskip("scipy.stats")
    a = np.array([x for x, _ in pairs])
    b = np.array([y for _, y in pairs])
    d = a - b
    if np.std(d) < 1e-9 * max(1.0, np.abs(d).max()):
        return  # degenerate convention checked separately
    t, p = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert abs(t - ref.statistic) <= 1e-6 * max(1.0, abs(ref.statistic))
    assert abs(p - ref.pvalue) < 1e-6
