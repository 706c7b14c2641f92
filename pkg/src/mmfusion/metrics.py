"""Binary-classifier statistics: rates, ROC/AUC, exact McNemar, bootstrap CIs."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _labels(labels):
    y = np.asarray(labels)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


@dataclass
class Rates:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def rates_from_counts(tp, tn, fp, fn):
    n = tp + tn + fp + fn
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Rates(tp, tn, fp, fn, (tp + tn) / n if n else 0.0, precision, recall, f1,
                 p_undef, r_undef)


def confusion_and_rates(scores, labels, threshold=0.5):
    """Counts at ``score >= threshold``; undefined precision/recall are 0 and flagged."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be nonempty and equal length")
    pred = s >= threshold
    pos = y == 1
    return rates_from_counts(int(np.sum(pred & pos)), int(np.sum(~pred & ~pos)),
                             int(np.sum(pred & ~pos)), int(np.sum(~pred & pos)))


@dataclass
class RocResult:
    auc: float
    auc_trapezoid: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_curve(scores, labels):
    """ROC points swept over distinct score thresholds, highest first, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    P, N = y.sum(), y.size - y.sum()
    fpr = np.r_[0.0, fps / N]
    tpr = np.r_[0.0, tps / P]
    thresholds = np.r_[np.inf, s[distinct]]
    return fpr, tpr, thresholds


def auc_mann_whitney(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s)  # average ranks: ties count one half
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_roc(scores, labels):
    """Mann-Whitney AUC, cross-checked against the trapezoidal ROC area."""
    auc = auc_mann_whitney(scores, labels)
    fpr, tpr, thr = roc_curve(scores, labels)
    trap = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    if abs(trap - auc) > 1e-12:
        raise ArithmeticError(f"AUC routes disagree: mann-whitney={auc!r} trapezoid={trap!r}")
    return RocResult(auc, trap, fpr, tpr, thr)


def youden_threshold(scores, labels):
    fpr, tpr, thr = roc_curve(scores, labels)
    i = int(np.argmax(tpr - fpr))
    return float(thr[i]) if np.isfinite(thr[i]) else float(np.max(scores))


def binom_cdf_half(k, n):
    """P(X <= k) for X ~ Binomial(n, 1/2), exact via integer arithmetic."""
    return sum(math.comb(n, i) for i in range(0, k + 1)) / 2 ** n


def mcnemar(preds_a, preds_b, labels):
    """Exact two-sided McNemar test on discordant pairs.

    ``b`` counts samples A got right and B got wrong, ``c`` the reverse.
    Returns ``(b, c, p)`` with ``p = min(1, 2 * P(X <= min(b, c)))``.
    """
    a = np.asarray(preds_a)
    b_ = np.asarray(preds_b)
    y = _labels(labels)
    if not (a.shape == b_.shape == y.shape):
        raise ValueError("prediction and label vectors must have equal length")
    ok_a = a == y
    ok_b = b_ == y
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    if b + c == 0:
        return b, c, 1.0
    p = 2.0 * min(binom_cdf_half(min(b, c), b + c), 0.5)
    return b, c, min(p, 1.0)


class BootstrapError(RuntimeError):
    pass


def bootstrap_ci(metric_fn, scores, labels, B=1000, alpha=0.05, seed=0,
                 require_both_classes=True, max_retries=100):
    """Percentile bootstrap interval ``(lo, hi, point)`` for ``metric_fn(scores, labels)``.

    Resamples that contain a single class are redrawn (up to ``max_retries``
    times each) when ``require_both_classes`` is set.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    n = y.size
    if n < 10:
        raise ValueError("bootstrap needs n >= 10")
    rng = np.random.default_rng(seed)
    point = metric_fn(s, y)
    values = np.empty(B)
    for b in range(B):
        for _ in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            yb = y[idx]
            if not require_both_classes or 0 < yb.sum() < n:
                break
        else:
            raise BootstrapError("bootstrap kept drawing single-class resamples; use a larger sample")
        values[b] = metric_fn(s[idx], yb)
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi), float(point)


@dataclass
class EvalReport:
    n: int
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc_roc: float
    threshold: float = 0.5
    youden_threshold: float = None
    precision_undefined: bool = False
    recall_undefined: bool = False
    ci: dict = field(default_factory=dict)
    roc_points: list = field(default_factory=list)
    mcnemar: dict = None

    def to_json(self):
        return asdict(self)


METRIC_FNS = {
    "auc_roc": lambda s, y: auc_mann_whitney(s, y),
    "accuracy": lambda s, y: confusion_and_rates(s, y).accuracy,
    "f1": lambda s, y: confusion_and_rates(s, y).f1,
    "precision": lambda s, y: confusion_and_rates(s, y).precision,
    "recall": lambda s, y: confusion_and_rates(s, y).recall,
}


def evaluate(scores, labels, threshold=0.5, bootstrap=0, seed=0):
    """Full report; ``bootstrap`` > 0 adds percentile CIs with that many resamples."""
    r = confusion_and_rates(scores, labels, threshold)
    roc = auc_roc(scores, labels)
    rep = EvalReport(
        n=len(labels), tp=r.tp, tn=r.tn, fp=r.fp, fn=r.fn, accuracy=r.accuracy,
        precision=r.precision, recall=r.recall, f1=r.f1, auc_roc=roc.auc, threshold=threshold,
        youden_threshold=youden_threshold(scores, labels),
        precision_undefined=r.precision_undefined, recall_undefined=r.recall_undefined,
        roc_points=[[float(a), float(b)] for a, b in zip(roc.fpr, roc.tpr)],
    )
    if bootstrap:
        for name, fn in METRIC_FNS.items():
            lo, hi, _ = bootstrap_ci(fn, scores, labels, B=bootstrap, seed=seed)
            rep.ci[name] = [lo, hi]
    return rep
