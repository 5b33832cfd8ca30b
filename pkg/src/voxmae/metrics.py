"""Clinical evaluation metrics.

Conventions, where a metric is otherwise undefined:

* QWK with zero expected disagreement returns 1.0 and warns.
* Dice of two empty masks returns 1.0 and warns.
* Operating points predict positive when ``score > threshold``; candidate
  thresholds are -inf, the midpoints between distinct scores, and +inf.
"""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple

import numpy as np
from scipy import stats

from .errors import DegenerateMetricWarning, InvalidConfigError, InvalidInputError, UndefinedMetricError


def qwk(y_true, y_pred, n_classes: int) -> float:
    """Quadratic weighted kappa for labels in ``0..n_classes-1``."""
    if n_classes < 2:
        raise InvalidConfigError("QWK needs at least 2 classes")
    a = np.asarray(y_true, dtype=np.int64).ravel()
    b = np.asarray(y_pred, dtype=np.int64).ravel()
    if a.size == 0 or a.size != b.size:
        raise InvalidInputError("QWK needs equal-length, non-empty label vectors")
    if a.min() < 0 or b.min() < 0 or a.max() >= n_classes or b.max() >= n_classes:
        raise InvalidInputError(f"labels must lie in 0..{n_classes - 1}")
    k = n_classes
    observed = np.zeros((k, k))
    np.add.at(observed, (a, b), 1.0)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / a.size
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    denom = (w * expected).sum()
    if denom == 0:
        warnings.warn("QWK: zero expected disagreement, returning 1.0", DegenerateMetricWarning, stacklevel=2)
        return 1.0
    return float(1.0 - (w * observed).sum() / denom)


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.size != y.size or s.size == 0:
        raise InvalidInputError("scores and labels must be equal-length and non-empty")
    if not set(np.unique(y)) <= {0, 1}:
        raise InvalidInputError("labels must be binary 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("ROC metrics need both classes present")
    if not np.isfinite(s).all():
        raise InvalidInputError("scores must be finite")
    return s, y


def roc_auc(scores, labels) -> float:
    """Normalised Mann-Whitney U with ties counted one half."""
    s, y = _binary_inputs(scores, labels)
    ranks = stats.rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels):
    """(thresholds, sensitivity, specificity) over every achievable threshold, ascending."""
    s, y = _binary_inputs(scores, labels)
    u = np.unique(s)
    thr = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    # count of scores > t
    tp = pos.size - np.searchsorted(pos, thr, side="right")
    fp = neg.size - np.searchsorted(neg, thr, side="right")
    return thr, tp / pos.size, (neg.size - fp) / neg.size


class OperatingPoint(NamedTuple):
    value: float          # the complementary metric achieved
    threshold: float
    fixed_achieved: float  # the fixed metric's value at that threshold
    reached: bool          # False when no threshold attains the target level


def fixed_operating_point(scores, labels, fix="spec", level=0.80) -> OperatingPoint:
    """Best complementary metric subject to ``fixed metric >= level``.

    ``fix="spec"`` reports sensitivity at the given specificity;
    ``fix="sens"`` reports specificity at the given sensitivity.  Ties in the
    complementary metric go to the threshold with the larger fixed metric.
    """
    if fix not in ("sens", "spec"):
        raise InvalidConfigError(f"fix must be 'sens' or 'spec', got {fix!r}")
    thr, sens, spec = roc_points(scores, labels)
    fixed, comp = (sens, spec) if fix == "sens" else (spec, sens)
    ok = fixed >= level - 1e-12
    if ok.any():
        idx = np.flatnonzero(ok)
        best = idx[np.lexsort((-fixed[idx], -comp[idx]))[0]]
        return OperatingPoint(float(comp[best]), float(thr[best]), float(fixed[best]), True)
    best = int(np.argmax(fixed))
    return OperatingPoint(float(comp[best]), float(thr[best]), float(fixed[best]), False)


def sens_at_spec(scores, labels, level=0.80) -> OperatingPoint:
    return fixed_operating_point(scores, labels, "spec", level)


def spec_at_sens(scores, labels, level=0.80) -> OperatingPoint:
    return fixed_operating_point(scores, labels, "sens", level)


def dice_score(pred_mask, true_mask) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        warnings.warn("Dice of two empty masks, returning 1.0", DegenerateMetricWarning, stacklevel=2)
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mean_dice(pred_labels, true_labels, n_classes) -> float:
    """Average foreground Dice over classes 1..n_classes-1."""
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        return float(np.mean([dice_score(p == c, t == c) for c in range(1, n_classes)]))


def mae_value(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise InvalidInputError("MAE needs equal-length, non-empty inputs")
    return float(np.mean(np.abs(p - t)))


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test; zero-variance differences are flagged degenerate."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise InvalidInputError("paired t-test needs equal-length samples of size >= 2")
    d = x - y
    n = d.size
    sd = d.std(ddof=1)
    if not sd > 1e-15 * max(1.0, float(np.abs(d).max())):
        return TTestResult(math.nan, math.nan, True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(min(max(p, 0.0), 1.0)), False)


def mean_std(values):
    """(mean, sample std or None when fewer than two values)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("no values")
    return float(v.mean()), (float(v.std(ddof=1)) if v.size >= 2 else None)
