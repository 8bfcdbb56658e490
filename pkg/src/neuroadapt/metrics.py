"""Classification metrics, per-seed deltas and mean/std aggregation.

All metrics are computed from first principles on numpy arrays.  ROC-AUC
uses the rank (Mann-Whitney) formulation with midranks for ties, which
equals the pairwise count that credits ties 0.5.  PR-AUC is average
precision with tied scores collapsed into one threshold step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, UndefinedMetricError


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label arrays differ in length: "
                        f"{y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    if y_true.size == 0:
        return cm
    if y_true.min() < 0 or y_true.max() >= num_classes \
            or y_pred.min() < 0 or y_pred.max() >= num_classes:
        raise DataError(f"labels outside [0, {num_classes})")
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm) / total)


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall over classes that actually occur."""
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise DataError("no class has ground-truth support")
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def cohen_kappa(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / (total * total)
    if p_e >= 1.0:
        return 0.0  # degenerate full-agreement-by-chance case
    return float((p_o - p_e) / (1.0 - p_e))


def weighted_f1(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    f1 = np.zeros(cm.shape[0], dtype=np.float64)
    for k in range(cm.shape[0]):
        denom = support[k] + predicted[k]  # equals 2tp+fp+fn
        f1[k] = 2.0 * tp[k] / denom if denom > 0 else 0.0
    return float((f1 * support).sum() / total)


def _check_binary_scores(scores, y_true):
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.shape != y_true.shape or scores.ndim != 1:
        raise DataError(f"scores/labels must be matching vectors, got "
                        f"{scores.shape} and {y_true.shape}")
    if not np.isin(y_true, (0, 1)).all():
        raise DataError("binary labels must be 0 or 1")
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"need both classes present, got {n_pos} positives and "
            f"{n_neg} negatives")
    return scores, y_true, n_pos, n_neg


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, y_true) -> float:
    """Probability a random positive outscores a random negative, ties
    credited one half (score = probability of class 1)."""
    scores, y_true, n_pos, n_neg = _check_binary_scores(scores, y_true)
    ranks = _midranks(scores)
    rank_sum = ranks[y_true == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, y_true) -> float:
    """Average precision: sum of recall increments times the precision at
    each distinct-score threshold, scanning scores descending."""
    scores, y_true, n_pos, _ = _check_binary_scores(scores, y_true)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = y_true[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def delta(metric_tta: float, metric_no_tta: float) -> float:
    """Relative improvement of an adapted run over its matched baseline."""
    return float(metric_tta) - float(metric_no_tta)


def aggregate(values) -> tuple:
    """(mean, sample std with n-1 divisor); a single cell reports std 0."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot aggregate zero cells")
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


METRIC_NAMES = ("accuracy", "balanced_accuracy", "cohen_kappa",
                "weighted_f1", "roc_auc", "pr_auc")


@dataclass
class MetricReport:
    accuracy: float
    balanced_accuracy: float
    cohen_kappa: float
    weighted_f1: float
    roc_auc: Optional[float] = None  # binary tasks only
    pr_auc: Optional[float] = None   # binary tasks only

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        return cls(**{name: doc.get(name) for name in METRIC_NAMES})


def compute_report(y_true, y_pred, probs, binary: bool) -> MetricReport:
    """All six metrics from one prediction set.  For binary tasks the
    ranking metrics use the class-1 probability; if the ground truth is
    single-class they are undefined and stored as None."""
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[1]
    cm = confusion_matrix(y_true, y_pred, num_classes)
    roc = pr = None
    if binary:
        if num_classes != 2:
            raise DataError("binary report needs 2-class probabilities")
        try:
            roc = roc_auc(probs[:, 1], y_true)
            pr = pr_auc(probs[:, 1], y_true)
        except UndefinedMetricError:
            roc = pr = None
    return MetricReport(
        accuracy=accuracy(cm),
        balanced_accuracy=balanced_accuracy(cm),
        cohen_kappa=cohen_kappa(cm),
        weighted_f1=weighted_f1(cm),
        roc_auc=roc,
        pr_auc=pr,
    )
