import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score

from voxmae import metrics as M
from voxmae.errors import (DegenerateMetricWarning, InvalidConfigError, InvalidInputError,
                           UndefinedMetricError)


# ---------------------------------------------------------------- oracles


def qwk_loop(a, b, k):
    """Confusion-matrix kappa written as explicit loops."""
    n = len(a)
    obs = [[0.0] * k for _ in range(k)]
    for x, y in zip(a, b):
        obs[x][y] += 1
    rows = [sum(obs[i]) for i in range(k)]
    cols = [sum(obs[i][j] for i in range(k)) for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += w * obs[i][j]
            den += w * rows[i] * cols[j] / n
    return 1.0 - num / den


def auc_pairs(s, y):
    pos = [v for v, l in zip(s, y) if l == 1]
    neg = [v for v, l in zip(s, y) if l == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def sweep_operating_point(s, y, fix, level):
    """Exhaustive sweep over every possible split of the sorted scores."""
    cands = sorted(set(s))
    thresholds = [-math.inf] + [(a + b) / 2 for a, b in zip(cands, cands[1:])] + [math.inf]
    best = None
    for t in thresholds:
        tp = sum(1 for v, l in zip(s, y) if l == 1 and v > t)
        tn = sum(1 for v, l in zip(s, y) if l == 0 and v <= t)
        sens, spec = tp / sum(y), tn / (len(y) - sum(y))
        fixed, comp = (sens, spec) if fix == "sens" else (spec, sens)
        if fixed >= level and (best is None or (comp, fixed) > best[:2]):
            best = (comp, fixed, t)
    return best


def ttest_mp(a, b):
    """Student-t two-sided p via the regularised incomplete beta function."""
    mpmath.mp.dps = 50
    d = [mpmath.mpf(x) - mpmath.mpf(y) for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    sd = mpmath.sqrt(sum((x - mean) ** 2 for x in d) / (n - 1))
    t = mean / (sd / mpmath.sqrt(n))
    nu = n - 1
    p = mpmath.betainc(nu / mpmath.mpf(2), mpmath.mpf(1) / 2, 0, nu / (nu + t * t), regularized=True)
    return float(t), float(p)


# ---------------------------------------------------------------- qwk


def test_qwk_perfect():
    assert M.qwk([0, 1, 2, 3], [0, 1, 2, 3], 4) == 1.0


def test_qwk_reversal_example():
    a, b = (0, 1, 2, 0, 1, 2), (2, 1, 0, 2, 1, 0)
    assert abs(M.qwk(a, b, 3) - qwk_loop(a, b, 3)) <= 1e-12
    assert abs(M.qwk(a, b, 3) - (-1.0)) <= 1e-12


def test_qwk_random_oracle():
    rng = np.random.default_rng(0)
    done = 0
    while done < 1000:
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 15))
        a = rng.integers(0, k, n)
        b = rng.integers(0, k, n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            v = M.qwk(a, b, k)
        if len(set(a)) == 1 and len(set(b)) == 1:
            continue
        assert abs(v - qwk_loop(list(a), list(b), k)) <= 1e-12
        assert abs(v - cohen_kappa_score(a, b, weights="quadratic", labels=list(range(k)))) <= 1e-12
        done += 1


@given(st.lists(st.integers(0, 3), min_size=2, max_size=20), st.lists(st.integers(0, 3), min_size=2, max_size=20))
def test_qwk_symmetry_and_reversal(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        v = M.qwk(a, b, 4)
        assert abs(v - M.qwk(b, a, 4)) <= 1e-12
        assert abs(v - M.qwk(3 - a, 3 - b, 4)) <= 1e-12
        assert -1 - 1e-12 <= v <= 1 + 1e-12
        if len(set(a.tolist())) > 1:
            assert M.qwk(a, a, 4) == pytest.approx(1.0, abs=1e-12)


def test_qwk_degenerate_and_errors():
    with pytest.warns(DegenerateMetricWarning):
        assert M.qwk([1, 1], [1, 1], 3) == 1.0
    with pytest.raises(InvalidConfigError):
        M.qwk([0], [0], 1)
    with pytest.raises(InvalidInputError):
        M.qwk([0, 3], [0, 1], 3)


# ---------------------------------------------------------------- auc


def test_auc_trivial():
    assert M.roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert M.roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        M.roc_auc([0.1, 0.2], [1, 1])


def test_auc_random_twenty():
    rng = np.random.default_rng(3)
    s = rng.random(20)
    y = np.array([1] * 9 + [0] * 11)
    assert M.roc_auc(s, y) == auc_pairs(s, y)


def test_auc_pairwise_oracle_many():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 16))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
        assert M.roc_auc(s, y) == auc_pairs(s.tolist(), y.tolist())


@settings(max_examples=60)
@given(st.lists(st.integers(-40, 40), min_size=4, max_size=25), st.randoms(use_true_random=False))
def test_auc_monotone_invariance(scores, r):
    s = np.array(scores) / 8.0
    y = np.array([r.randint(0, 1) for _ in s])
    y[0], y[1] = 0, 1
    f = np.exp(2.0 * s) + 3.0  # strictly increasing
    assert M.roc_auc(s, y) == pytest.approx(M.roc_auc(f, y), abs=1e-12)
    a = M.fixed_operating_point(s, y, "spec", 0.8)
    b = M.fixed_operating_point(f, y, "spec", 0.8)
    assert a.value == b.value and a.fixed_achieved == b.fixed_achieved
    # thresholds map through the transform: both split the data identically
    assert np.array_equal(s > a.threshold, f > b.threshold)


# ---------------------------------------------------------------- operating points


def test_operating_point_example_matches_sweep():
    y = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    s = [.9, .8, .7, .2, .6, .5, .4, .3, .2, .1]
    op = M.fixed_operating_point(s, y, "spec", 0.8)
    comp, fixed, thr = sweep_operating_point(s, y, "spec", 0.8)
    assert (op.value, op.fixed_achieved, op.threshold) == (comp, fixed, thr)
    assert op.value == 0.75 and op.reached


def test_operating_point_random_sweep():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(4, 14))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)
        for fix in ("sens", "spec"):
            level = float(rng.choice([0.5, 0.8, 0.9]))
            op = M.fixed_operating_point(s, y, fix, level)
            comp, fixed, thr = sweep_operating_point(s.tolist(), y.tolist(), fix, level)
            assert op.value == comp and op.fixed_achieved == fixed


def test_operating_point_separated():
    op = M.fixed_operating_point([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], "sens", 0.8)
    assert op.value == 1.0 and 0.2 < op.threshold < 0.8


def test_operating_point_level_zero_convention():
    s, y = [0.9, 0.3, 0.5, 0.1], [0, 1, 0, 1]  # every positive scores below every negative
    thr, sens, spec = M.roc_points(s, y)
    # most permissive threshold predicts every case positive: specificity 0
    assert thr[0] == -np.inf and sens[0] == 1.0 and spec[0] == 0.0
    # the maximise-complement rule then selects the strictest threshold
    op = M.fixed_operating_point(s, y, "sens", 0.0)
    assert op.value == 1.0 and op.threshold == np.inf


def test_operating_point_unreached_flag():
    # every threshold reaching sens >= 0.8 exists (-inf), so force with level > 1
    op = M.fixed_operating_point([0.1, 0.2], [0, 1], "sens", 1.5)
    assert not op.reached and op.fixed_achieved == 1.0


# ---------------------------------------------------------------- dice / mae


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    full = np.ones_like(a)
    assert M.dice_score(full, full) == 1.0
    assert M.dice_score(a, ~a) == 0.0
    assert M.dice_score(a, full) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.warns(DegenerateMetricWarning):
        assert M.dice_score(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(InvalidInputError):
        M.dice_score(np.zeros(3), np.zeros(4))


def test_dice_oracle_many():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, 3))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        if not a.any() and not b.any():
            continue
        inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
        assert M.dice_score(a, b) == 2 * inter / (a.sum() + b.sum())
        assert M.dice_score(a, b) == M.dice_score(b, a)


def test_mae_examples_and_oracle():
    t = np.array([1.0, 2.0, 5.0])
    assert M.mae_value(t, t) == 0.0
    assert M.mae_value(t + 3, t) == 3.0
    with pytest.raises(InvalidInputError):
        M.mae_value([], [])
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        p, q = rng.normal(size=n), rng.normal(size=n)
        loop = sum(abs(x - y) for x, y in zip(p, q)) / n
        assert abs(M.mae_value(p, q) - loop) <= 1e-12


# ---------------------------------------------------------------- t-test


def test_ttest_reference():
    a, b = (0.43, 0.42, 0.44), (0.41, 0.42, 0.41)
    res = M.paired_ttest(a, b)
    t, p = ttest_mp(a, b)
    assert not res.degenerate
    assert res.t == pytest.approx(t, rel=1e-9)
    assert res.p == pytest.approx(p, rel=1e-9)


def test_ttest_degenerate():
    assert M.paired_ttest([1, 2, 3], [1, 2, 3]).degenerate
    assert M.paired_ttest([2, 3, 4], [1, 2, 3]).degenerate
    with pytest.raises(InvalidInputError):
        M.paired_ttest([1], [2])


def test_ttest_random_oracle():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        a, b = rng.normal(size=n), rng.normal(size=n)
        res = M.paired_ttest(a, b)
        t, p = ttest_mp(a, b)
        assert res.t == pytest.approx(t, rel=1e-9, abs=1e-12)
        assert res.p == pytest.approx(p, rel=1e-8, abs=1e-14)
        assert 0.0 <= res.p <= 1.0


def test_mean_std():
    m, s = M.mean_std([0.42, 0.43, 0.44])
    assert m == pytest.approx(0.43, abs=1e-15) and s == pytest.approx(0.01, abs=1e-15)
    assert M.mean_std([0.5]) == (0.5, None)
