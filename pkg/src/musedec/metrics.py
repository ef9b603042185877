"""Multi-label evaluation metrics and significance machinery.

mAP uses the step-wise precision/recall sum without interpolation; AUC is the
rank-sum formulation with half-credit ties; both macro-average over classes
that have at least one positive (AUC additionally needs a negative).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


class MetricsError(Exception):
    pass


@dataclass
class EvalResult:
    map: float
    auc: float
    hamming: float
    per_class_ap: list = field(default_factory=list)
    per_class_auc: list = field(default_factory=list)
    excluded_classes: int = 0

    def as_dict(self):
        return {"map": self.map, "auc": self.auc, "hamming": self.hamming}


def _average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    # descending scores, ties broken by stable original index
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    n_pos = int(hits.sum())
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    precision_at_hit = cum_hits[hits] / ranks[hits]
    return float(precision_at_hit.sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray):
    """Macro mAP over classes with at least one positive.

    Returns (map, per_class list with None for excluded classes).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise MetricsError(f"shape mismatch {scores.shape} vs {labels.shape}")
    per_class = []
    included = []
    for c in range(scores.shape[1]):
        if labels[:, c].sum() == 0:
            per_class.append(None)
            continue
        ap = _average_precision(scores[:, c], labels[:, c])
        per_class.append(ap)
        included.append(ap)
    if not included:
        raise MetricsError("no class has a positive example")
    return float(np.mean(included)), per_class


def _class_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    # Mann-Whitney U through midranks: ties get half credit
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = stats.rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, labels: np.ndarray):
    """Macro ROC AUC over classes with >= 1 positive and >= 1 negative.

    Returns (auc, per_class list with None for degenerate classes).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_class, included = [], []
    for c in range(scores.shape[1]):
        n_pos = int((labels[:, c] > 0).sum())
        if n_pos == 0 or n_pos == scores.shape[0]:
            per_class.append(None)
            continue
        auc = _class_auc(scores[:, c], labels[:, c])
        per_class.append(auc)
        included.append(auc)
    if not included:
        raise MetricsError("every class is degenerate for AUC")
    return float(np.mean(included)), per_class


def hamming_distance(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of (sample, class) cells where the thresholded score misses the label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    hard = scores >= threshold
    return float((hard != (labels > 0)).mean())


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> EvalResult:
    m, per_ap = mean_average_precision(scores, labels)
    a, per_auc = macro_auc(scores, labels)
    excluded = sum(1 for v in per_ap if v is None)
    return EvalResult(
        map=m,
        auc=a,
        hamming=hamming_distance(scores, labels, threshold),
        per_class_ap=per_ap,
        per_class_auc=per_auc,
        excluded_classes=excluded,
    )


@dataclass
class TTestResult:
    p_value: float
    statistic: float
    paired: bool
    degenerate: bool = False


def t_test(runs_a, runs_b, paired: bool = False) -> TTestResult:
    """Two-sided t-test; paired over per-seed differences, else Welch."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricsError("need at least two runs per group")
    if paired and len(a) != len(b):
        raise MetricsError("paired test needs equal-length runs")
    if paired:
        diffs = a - b
        if diffs.std(ddof=1) == 0.0:
            if diffs.mean() == 0.0:
                return TTestResult(1.0, 0.0, True, degenerate=True)
            return TTestResult(0.0, np.inf if diffs.mean() > 0 else -np.inf, True, degenerate=True)
        res = stats.ttest_rel(a, b)
        return TTestResult(float(res.pvalue), float(res.statistic), True)
    if a.std(ddof=1) == 0.0 and b.std(ddof=1) == 0.0:
        if a.mean() == b.mean():
            return TTestResult(1.0, 0.0, False, degenerate=True)
        return TTestResult(0.0, np.inf if a.mean() > b.mean() else -np.inf, False, degenerate=True)
    res = stats.ttest_ind(a, b, equal_var=False)
    return TTestResult(float(res.pvalue), float(res.statistic), False)


def holm_bonferroni(p_values, alpha: float = 0.05):
    """Step-down Holm adjustment; returns (adjusted p-values, reject flags)."""
    p = np.asarray(p_values, dtype=np.float64)
    if (p < 0).any() or (p > 1).any():
        raise MetricsError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adjusted[idx] = running
    reject = np.zeros(m, dtype=bool)
    for rank, idx in enumerate(order):
        if adjusted[idx] <= alpha:
            reject[idx] = True
        else:
            break
    return adjusted.tolist(), reject.tolist()
