import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuzzyp300.errors import DimensionError
from fuzzyp300.metrics import (
    ConfusionCounts, confusion, evaluation_report, paired_test, scores, summarize_subjects, weighted_scores,
)


def scalar_oracle(p, z, thr=0.5):
    tp = fp = fn = tn = 0
    for pi, zi in zip(p, z):
        pred = 1 if pi >= thr else 0
        if pred == 1 and zi == 1:
            tp += 1
        elif pred == 1:
            fp += 1
        elif zi == 1:
            fn += 1
        else:
            tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (tp, fp, fn, tn), {"accuracy": (tp + tn) / len(p), "precision": prec, "recall": rec, "f1": f1}


def test_confusion_examples():
    z = np.array([0, 1, 1, 0, 1])
    c = confusion(z.astype(float), z)
    assert c.fp == 0 and c.fn == 0 and c.tp == 3 and c.tn == 2
    c = confusion(np.full(5, 0.5), z)
    assert c.tp + c.fp == 5


def test_confusion_length_mismatch():
    with pytest.raises(DimensionError):
        confusion([0.1, 0.2], [1])


def test_scores_examples():
    s = scores(ConfusionCounts(tp=8, fp=2, fn=2, tn=88))
    assert s == pytest.approx({"precision": 0.8, "recall": 0.8, "f1": 0.8, "accuracy": 0.96})
    s = scores(ConfusionCounts(0, 0, 0, 10))
    assert s == {"accuracy": 1.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    assert scores(ConfusionCounts(5, 0, 0, 5)) == {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_scores_empty():
    with pytest.raises(ValueError):
        scores(ConfusionCounts(0, 0, 0, 0))


def test_scalar_oracle_1000_batches():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        p = rng.uniform(0, 1, n)
        p[rng.uniform(size=n) < 0.1] = 0.5  # exercise the tie rule
        z = rng.integers(0, 2, n)
        counts, expected = scalar_oracle(p, z)
        c = confusion(p, z)
        assert (c.tp, c.fp, c.fn, c.tn) == counts
        assert scores(c) == expected


counts = st.builds(ConfusionCounts, *(st.integers(0, 500) for _ in range(4))).filter(lambda c: c.total > 0)


@settings(max_examples=200, deadline=None)
@given(counts)
def test_score_identities(c):
    s = scores(c)
    assert all(0.0 <= v <= 1.0 for v in s.values())
    if s["precision"] > 0 and s["recall"] > 0:
        hm = 2 / (1 / s["precision"] + 1 / s["recall"])
        assert s["f1"] == pytest.approx(hm, rel=1e-12)
    flipped = ConfusionCounts(tp=c.tn, fp=c.fn, fn=c.fp, tn=c.tp)
    assert scores(flipped)["accuracy"] == s["accuracy"]
    w = weighted_scores(c)
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in w.values())


def test_weighted_recall_equals_accuracy():
    # support-weighted recall over both classes reduces to accuracy
    c = ConfusionCounts(tp=30, fp=7, fn=10, tn=153)
    assert weighted_scores(c)["recall"] == pytest.approx(scores(c)["accuracy"], rel=1e-12)


def test_evaluation_report_layout():
    doc = evaluation_report([0.9, 0.2, 0.6], [1, 0, 0])
    assert doc["confusion"] == {"tp": 1, "fp": 1, "fn": 0, "tn": 1}
    assert set(doc["scores"]) == {"accuracy", "precision", "recall", "f1"}


# paired comparison

def test_paired_hand_example():
    r = paired_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert r.t == pytest.approx(2.0 / (1.0 / math.sqrt(3.0)), rel=1e-12)
    assert r.t == pytest.approx(3.4641016, rel=1e-7)
    assert r.df == 2 and not r.degenerate
    # two-sided p for t(2): 1 - t / sqrt(t^2 + 2)
    assert r.p == pytest.approx(1.0 - r.t / math.sqrt(r.t ** 2 + 2.0), rel=1e-10)


def test_paired_degenerate():
    a = [0.8, 0.9, 0.7]
    r = paired_test(a, a)
    assert r.degenerate and r.p == 1.0
    r = paired_test(a, [v - 0.1 for v in [0.8, 0.9, 0.7]])
    assert r.degenerate and r.p == 1.0


def test_paired_errors():
    with pytest.raises(DimensionError):
        paired_test([1.0], [2.0])
    with pytest.raises(DimensionError):
        paired_test([1.0, 2.0], [2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=20))
def test_paired_antisymmetric(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    ab, ba = paired_test(a, b), paired_test(b, a)
    assert ab.degenerate == ba.degenerate
    assert ab.t == pytest.approx(-ba.t, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, abs=1e-12)
    assert 0.0 <= ab.p <= 1.0


def test_summarize_subjects():
    doc = summarize_subjects({
        "s1": {"accuracy": 0.9, "f1": 0.8, "precision": 0.7, "recall": 0.9},
        "s2": {"accuracy": 0.7, "f1": 0.6, "precision": 0.5, "recall": 0.7},
    })
    assert doc["summary"]["accuracy"]["mean"] == pytest.approx(0.8)
    assert doc["summary"]["accuracy"]["std"] == pytest.approx(math.sqrt(0.02))
