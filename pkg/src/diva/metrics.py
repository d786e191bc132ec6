"""Evaluation metrics and significance testing, implemented from scratch.

AUC uses the Mann-Whitney rank statistic with midranks for ties. The
paired t-test p-value evaluates the regularized incomplete beta function
with the Lentz continued fraction (double precision, relative tolerance
~1e-15), via  P(T <= t) = 1 - I_{df/(df+t^2)}(df/2, 1/2) / 2  for t >= 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .encoders import InputError


def confusion_counts(predictions, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(predictions, labels):
        cm[int(t), int(p)] += 1
    return cm


def auc_rank(scores, binary_labels):
    """One-vs-rest ROC AUC via midranks; NaN if only one class present."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[y].sum()
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pair_counting(scores, binary_labels):
    """Brute-force oracle: fraction of (pos, neg) pairs ordered correctly,
    ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels, dtype=bool)
    pos = scores[y]
    neg = scores[~y]
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    wins = 0.0
    for p in pos:
        wins += (p > neg).sum() + 0.5 * (p == neg).sum()
    return wins / (pos.size * neg.size)


@dataclass
class MetricSet:
    accuracy: float
    precision: np.ndarray     # per class; NaN where undefined
    recall: np.ndarray
    f1: np.ndarray
    weighted_f1: float
    auc: np.ndarray           # per class one-vs-rest
    macro_auc: float
    support: np.ndarray

    def as_dict(self):
        d = {"accuracy": self.accuracy, "weighted_f1": self.weighted_f1,
             "macro_auc": self.macro_auc}
        for k in range(self.f1.size):
            d[f"precision_{k}"] = float(self.precision[k])
            d[f"recall_{k}"] = float(self.recall[k])
            d[f"f1_{k}"] = float(self.f1[k])
            d[f"auc_{k}"] = float(self.auc[k])
        return d


def compute_metrics(scores, labels, n_classes=None):
    """Accuracy, per-class precision/recall/F1, support-weighted F1, and
    one-vs-rest AUC from class-probability scores.

    Classes absent from the labels get NaN metrics and are excluded from
    the weighted/macro means (with a warning).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise InputError(f"scores {scores.shape} vs labels {labels.shape}")
    K = n_classes or scores.shape[1]
    preds = scores.argmax(axis=1)
    accuracy = float((preds == labels).mean())

    precision = np.full(K, np.nan)
    recall = np.full(K, np.nan)
    f1 = np.full(K, np.nan)
    auc = np.full(K, np.nan)
    support = np.array([(labels == k).sum() for k in range(K)])
    for k in range(K):
        if support[k] == 0:
            warnings.warn(f"class {k} absent from labels; metrics undefined")
            continue
        tp = float(((preds == k) & (labels == k)).sum())
        fp = float(((preds == k) & (labels != k)).sum())
        fn = float(((preds != k) & (labels == k)).sum())
        precision[k] = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall[k] = tp / (tp + fn)
        denom = precision[k] + recall[k]
        f1[k] = 2 * precision[k] * recall[k] / denom if denom > 0 else 0.0
        auc[k] = auc_rank(scores[:, k], labels == k)

    present = support > 0
    weighted_f1 = float((f1[present] * support[present]).sum() / support[present].sum())
    auc_ok = present & np.isfinite(auc)
    macro_auc = float(auc[auc_ok].mean()) if auc_ok.any() else float("nan")
    return MetricSet(accuracy, precision, recall, f1, weighted_f1, auc,
                     macro_auc, support)


# ---------------------------------------------------------------------------
# Student's t distribution via the regularized incomplete beta function
# ---------------------------------------------------------------------------


def _betacf(a, b, x, max_iter=300, eps=3e-16):
    """Lentz's modified continued fraction for the incomplete beta."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def incomplete_beta(a, b, x):
    """Regularized I_x(a, b) via the continued fraction, using the symmetry
    I_x(a,b) = 1 - I_{1-x}(b,a) to stay in the fast-converging region."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t, df):
    """P(T <= t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


@dataclass
class TTestResult:
    t: float
    p: float
    significant: bool
    degenerate: bool = False


def paired_ttest(ours, baseline, alpha=0.05):
    """One-tailed paired t-test for mean(ours - baseline) > 0, paired by
    position (seed). Zero-variance differences take the documented
    degenerate conventions instead of a t statistic."""
    a = np.asarray(ours, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("paired t-test needs two equal-length series of >= 2 runs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        if np.all(d > 0):
            return TTestResult(math.inf, 0.0, True, degenerate=True)
        if np.all(d < 0):
            return TTestResult(-math.inf, 1.0, False, degenerate=True)
        return TTestResult(0.0, 0.5, False, degenerate=True)
    t = d.mean() / (sd / math.sqrt(d.size))
    p = 1.0 - t_cdf(t, d.size - 1)
    return TTestResult(float(t), float(p), p < alpha)


# ---------------------------------------------------------------------------
# 2-component PCA by power iteration (for embedding export)
# ---------------------------------------------------------------------------


def pca_2d(points, tol=1e-9, max_iter=10_000):
    """Top-2 principal axes of mean-centered points via power iteration
    with deflation. Returns (components (2, h), projection (n, 2))."""
    x = np.asarray(points, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    comps = []
    c = cov.copy()
    rng = np.random.default_rng(12345)
    for _ in range(2):
        v = rng.normal(size=c.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = c @ v
            norm = np.linalg.norm(w)
            if norm < tol:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v = w
                lam = norm
                break
            v = w
            lam = norm
        comps.append(v)
        c = c - lam * np.outer(v, v)
    components = np.stack(comps)
    return components, xc @ components.T
