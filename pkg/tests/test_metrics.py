import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import metric_oracle as oracle
from caml.metrics import (
    EvalReport,
    PredictionMatrix,
    auc,
    evaluate,
    macro_f1_mean,
    macro_prf,
    micro_prf,
    precision_at_n,
)


def pm(scores, truth):
    return PredictionMatrix(np.array(scores, dtype=float), np.array(truth))


def test_micro_examples():
    assert micro_prf(pm([[0.9, 0.1]], [[1, 0]])) == (1.0, 1.0, 1.0)
    p, r, f = micro_prf(pm([[0.9, 0.6], [0.2, 0.7]], [[1, 0], [0, 1]]))
    assert (p, r, f) == (2 / 3, 1.0, 4 / 5)
    assert micro_prf(pm([[0.1, 0.2]], [[0, 0]])) == (0.0, 0.0, 0.0)


def test_macro_examples():
    assert macro_prf(pm([[0.9, 0.8]], [[1, 1]])) == (1.0, 1.0, 1.0)
    mp, mr, mf = macro_prf(pm([[0.9, 0.6], [0.2, 0.7]], [[1, 0], [0, 1]]))
    assert (mp, mr) == (3 / 4, 1.0)
    assert mf == 2 * 0.75 / 1.75
    # second label has no positives and no predictions: recall 0
    assert macro_prf(pm([[0.9, 0.1]], [[1, 0]]))[1] == 0.5


def test_threshold_is_inclusive():
    assert micro_prf(pm([[0.5]], [[1]]))[0] == 1.0


def test_auc_examples():
    assert auc(pm([[0.9], [0.1]], [[1], [0]])) == (1.0, 1.0)
    assert auc(pm([[0.3], [0.3], [0.3]], [[1], [0], [1]]))[1] == 0.5
    macro, micro = auc(pm([[0.9], [0.8], [0.3], [0.2]], [[1], [0], [1], [0]]))
    assert macro == micro == 0.75


def test_auc_undefined_labels_skipped():
    macro, _ = auc(pm([[0.9, 0.3], [0.1, 0.4]], [[1, 0], [0, 0]]))
    assert macro == 1.0
    assert auc(pm([[0.2]], [[0]])) == (None, None)


def test_precision_at_n_examples():
    assert precision_at_n(pm([[0.9, 0.7, 0.1]], [[1, 0, 1]]), 2) == 0.5
    assert precision_at_n(pm([[0.9, 0.7, 0.1], [0.1, 0.2, 0.3]], [[1, 1, 0], [0, 1, 1]]), 2) == 1.0
    # ties resolved by label index
    assert precision_at_n(pm([[0.5, 0.5, 0.5]], [[0, 1, 0]]), 1) == 0.0
    with pytest.raises(ValueError):
        precision_at_n(pm([[0.5, 0.5]], [[0, 1]]), 3)


def test_shape_and_finiteness_checks():
    with pytest.raises(ValueError):
        pm([[0.1, 0.2]], [[1]])
    with pytest.raises(ValueError):
        pm([[np.nan]], [[1]])


@st.composite
def matrices(draw, max_docs=6, max_labels=8):
    D = draw(st.integers(1, max_docs))
    L = draw(st.integers(1, max_labels))
    # coarse score grid so ties and threshold hits occur often
    scores = draw(st.lists(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]),
                                    min_size=L, max_size=L), min_size=D, max_size=D))
    truth = draw(st.lists(st.lists(st.booleans(), min_size=L, max_size=L), min_size=D, max_size=D))
    return scores, truth


@settings(max_examples=200, deadline=None)
@given(matrices())
def test_metrics_match_brute_force(m):
    scores, truth = m
    x = pm(scores, truth)
    assert micro_prf(x) == oracle.micro(scores, truth)
    mp, mr, mf, mf_mean = oracle.macro(scores, truth)
    assert macro_prf(x) == (mp, mr, mf)
    assert macro_f1_mean(x) == mf_mean
    assert auc(x) == oracle.aucs(scores, truth)
    for n in range(1, len(scores[0]) + 1):
        assert precision_at_n(x, n) == oracle.p_at_n(scores, truth, n)


@settings(max_examples=100, deadline=None)
@given(matrices(), st.randoms())
def test_metrics_invariant_to_document_and_label_order(m, rnd):
    scores, truth = np.array(m[0]), np.array(m[1])
    rows = list(range(scores.shape[0]))
    cols = list(range(scores.shape[1]))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    a, b = pm(scores, truth), pm(scores[rows][:, cols], truth[rows][:, cols])
    assert micro_prf(a) == micro_prf(b)
    assert macro_prf(a) == macro_prf(b)
    assert auc(a) == auc(b)
    c = pm(scores[rows], truth[rows])
    for n in range(1, scores.shape[1] + 1):
        assert precision_at_n(a, n) == precision_at_n(c, n)


@settings(max_examples=100, deadline=None)
@given(matrices())
def test_auc_invariant_under_monotone_transform(m):
    scores, truth = np.array(m[0]), m[1]
    assert auc(pm(scores, truth)) == auc(pm(np.sqrt(scores) / 3 + 0.01, truth))


@settings(max_examples=100, deadline=None)
@given(matrices())
def test_hits_non_decreasing_in_n(m):
    x = pm(*m)
    hits = [precision_at_n(x, n) * n for n in range(1, x.scores.shape[1] + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(hits, hits[1:]))
    assert all(0.0 <= v <= 1.0 for v in micro_prf(x) + macro_prf(x))


def test_evaluate_report_and_kinds():
    scores = [[0.9, 0.6, 0.1], [0.2, 0.7, 0.8]]
    truth = [[1, 0, 0], [0, 1, 1]]
    rep = evaluate(pm(scores, truth), ns=(1, 2), labels=["D1", "D2", "P1"],
                   kinds=["diagnosis", "diagnosis", "procedure"])
    assert rep.n_docs == 2 and set(rep.p_at) == {1, 2}
    assert rep.kind_micro_f1["procedure"] == oracle.micro(scores, truth, labels=[2])[2]
    assert rep.kind_micro_f1["diagnosis"] == oracle.micro(scores, truth, labels=[0, 1])[2]
    assert [r["label"] for r in rep.per_label] == ["D1", "D2", "P1"]
    assert EvalReport.from_json(rep.to_json()) == rep
    assert "P@2" in rep.table()
    with pytest.raises(ValueError):
        evaluate(pm(scores, truth), ns=(4,))
