import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from resboost import metrics as M

Y4, S4 = [0, 0, 1, 1], [0.1, 0.8, 0.4, 0.9]


def pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    good = ties = 0
    for a in pos:
        for b in neg:
            good += a > b
            ties += a == b
    return (good + 0.5 * ties) / (len(pos) * len(neg))


def brute_ks(y, s):
    n_pos, n_neg = (y == 1).sum(), (y == 0).sum()
    best = 0.0
    for t in np.r_[np.unique(s), np.inf]:
        tp = int(((s >= t) & (y == 1)).sum())
        fp = int(((s >= t) & (y == 0)).sum())
        best = max(best, abs(tp / n_pos - fp / n_neg))
    return best


def random_instance(rng):
    n = int(rng.integers(2, 501))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = rng.normal(size=n) + 0.7 * y
    if rng.random() < 0.5:
        s = np.round(s, 1)  # force ties
    return y, s


def test_auc_examples():
    assert M.auc([0, 1], [0.1, 0.9]) == 1.0
    assert M.auc([0, 1, 0, 1], [0.3] * 4) == 0.5
    assert M.auc(Y4, S4) == 0.75


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        y, s = random_instance(rng)
        assert M.auc(y, s) == pytest.approx(pairwise_auc(y, s), abs=1e-12)


def test_ks_examples():
    assert M.ks(Y4, S4) == 0.5
    assert M.ks([0, 1, 0, 1], [0.2, 0.2, 0.7, 0.7]) == 0.0
    assert M.ks([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0


def test_ks_matches_brute_force_exactly():
    rng = np.random.default_rng(7)
    for _ in range(100):
        y, s = random_instance(rng)
        assert M.ks(y, s) == brute_ks(y, s)


def test_single_class_and_length_errors():
    for fn in (M.auc, M.ks):
        with pytest.raises(M.MetricError):
            fn([1, 1], [0.1, 0.2])
    with pytest.raises(M.MetricError):
        M.logloss([1, 0], [0.5])
    with pytest.raises(M.MetricError):
        M.auc([1, 0, 1], [0.5, 0.2])


def test_logloss_examples():
    assert M.logloss([1], [1.0]) == pytest.approx(1e-9, rel=1e-6)
    assert M.logloss([1], [0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert M.logloss([1, 0], [0.9, 0.1]) == pytest.approx(-math.log(0.9), abs=1e-12)
    assert M.logloss([1, 0], [0.9, 0.1]) == pytest.approx(0.105361, abs=1e-6)
    assert math.isfinite(M.logloss([1, 0], [0.0, 1.0]))


def test_accuracy_examples():
    y = np.array([0, 1, 1, 0, 1])
    assert M.accuracy(y, y.astype(float)) == 1.0
    assert M.accuracy(y, 1.0 - y) == 0.0
    assert M.accuracy(y, np.full(5, 0.5)) == pytest.approx(y.mean())


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100), st.floats(-50, 50))
def test_auc_invariant_under_increasing_maps(seed, a, b):
    y, s = random_instance(np.random.default_rng(seed))
    s = np.clip(s, -5, 5)
    base = M.auc(y, s)
    assert M.auc(y, a * s + b) == pytest.approx(base, abs=1e-12)
    assert M.auc(y, np.exp(s)) == pytest.approx(base, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_auc_of_negated_scores_complements(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 300))
    y = rng.integers(0, 2, n)
    y[:2] = [1, 0]
    s = rng.permutation(n).astype(float)  # tie free
    assert M.auc(y, s) + M.auc(y, -s) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_report_ranges(seed):
    rng = np.random.default_rng(seed)
    y, s = random_instance(rng)
    r = M.evaluate(y, 1 / (1 + np.exp(-s)))
    assert 0 <= r.auc <= 1 and 0 <= r.ks <= 1 and 0 <= r.accuracy <= 1
    assert r.logloss >= 0 and r.n == len(y)


def test_compare_and_formats():
    y = np.array([0, 1, 0, 1, 1])
    base = M.evaluate(y, np.array([0.4, 0.6, 0.5, 0.4, 0.7]))
    better = M.compare(M.evaluate(y, np.array([0.1, 0.9, 0.2, 0.8, 0.7])), base)
    assert better.deltas["auc"] == pytest.approx(better.auc - base.auc)
    text = M.format_reports({"legacy": base, "final": better})
    assert "delta" in text and text.count("\n") == 4
    assert json.loads(M.reports_json({"final": better}))["final"]["n"] == 5
