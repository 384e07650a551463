import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calvsign import metrics as M
from calvsign.nn import ContractError


def pair_count_auc(scores, labels):
    """Loop oracle: fraction of (positive, negative) pairs ranked correctly, ties half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_example(self):
        assert M.confusion_counts([0.9, 0.1], [1, 0]) == M.ConfusionCounts(tp=1, fp=0, tn=1, fn=0)

    def test_all_positive_predictions(self):
        c = M.confusion_counts(np.ones(10), [0, 1] * 5)
        assert c.fp == 5 and c.tn == 0 and c.total == 10

    def test_threshold_is_inclusive(self):
        assert M.confusion_counts([0.5], [0]).fp == 1

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            M.confusion_counts([], [])

    @pytest.mark.parametrize("t", [0.0, 1.0])
    def test_threshold_range(self, t):
        with pytest.raises(ContractError):
            M.confusion_counts([0.2], [1], threshold=t)


class TestPRF:
    def test_example(self):
        prf = M.precision_recall_f1(M.ConfusionCounts(tp=9, fp=1, tn=0, fn=1))
        np.testing.assert_allclose(tuple(prf), (0.9, 0.9, 0.9), rtol=1e-15)
        assert prf.flags == ()

    def test_degenerate_precision_flagged(self):
        prf = M.precision_recall_f1(M.ConfusionCounts(tp=0, fp=0, tn=5, fn=5))
        assert prf.precision == 0.0 and "precision" in prf.flags

    def test_perfect(self):
        assert tuple(M.precision_recall_f1(M.ConfusionCounts(4, 0, 4, 0))) == (1.0, 1.0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_rates_bounded_and_harmonic(self, tp, fp, tn, fn):
        p, r, f = M.precision_recall_f1(M.ConfusionCounts(tp, fp, tn, fn))
        assert 0 <= min(p, r, f) and max(p, r, f) <= 1
        if p + r > 0:
            assert f == pytest.approx(2 * p * r / (p + r))

    def test_fpr(self):
        assert M.false_positive_rate(M.ConfusionCounts(1, 3, 1, 0)) == 0.75


class TestROC:
    def test_perfect_separation(self):
        auc, roc = M.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc == 1.0
        assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            M.roc_auc([0.1, 0.2], [1, 1])

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        aucs = [M.roc_auc(rng.random(2000), rng.integers(0, 2, 2000))[0] for _ in range(20)]
        assert abs(np.mean(aucs) - 0.5) <= 0.05
        assert max(abs(a - 0.5) for a in aucs) <= 0.05

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
    def test_matches_pair_oracle(self, rows):
        scores = [s / 6 for s, _ in rows]
        labels = [y for _, y in rows]
        if len(set(labels)) < 2:
            return
        auc, roc = M.roc_auc(scores, labels)
        assert auc == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)
        assert M.mann_whitney_auc(scores, labels) == pytest.approx(auc, abs=1e-12)
        fpr, tpr = np.array(roc).T
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)

    def test_rank_symmetry(self):
        rng = np.random.default_rng(1)
        s = np.round(rng.random(200), 2)
        y = rng.integers(0, 2, 200)
        assert M.roc_auc(s, y)[0] + M.roc_auc(-s, y)[0] == pytest.approx(1.0, abs=1e-12)


class TestSummarize:
    def test_fields(self):
        out = M.summarize([0.8, 0.6, 0.3, 0.1], [1, 0, 1, 0])
        assert out["confusion"] == {"tp": 1, "fp": 1, "tn": 1, "fn": 1}
        assert out["auc"] == 0.75
        assert out["fpr"] == 0.5

    def test_single_class_has_no_auc(self):
        out = M.summarize([0.8, 0.6], [1, 1])
        assert out["auc"] is None and out["roc"] == []
