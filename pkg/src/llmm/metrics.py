"""Classification metrics: confusion-matrix rates, AUROC and AUPRC.

Conventions:

* a rate whose denominator is zero is reported as 0 (e.g. precision when
  nothing was predicted positive);
* multiclass precision/recall/F1 are macro averages over all classes;
* AUROC counts tied positive/negative pairs as half a win;
* AUPRC is the step-wise area (average precision), sweeping thresholds from
  the highest score down with tied scores entering together.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricUndefinedError


def _safe_div(a: float, b: float) -> float:
    return float(a) / float(b) if b else 0.0


def confusion_matrix(predictions, labels, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DataError("no predictions to score")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def confusion_metrics(predictions, labels, n_classes: int | None = None) -> dict:
    """Accuracy plus precision/recall/F1.

    With two classes the scores are for class 1; with more they are macro
    averages. The confusion matrix is returned alongside.
    """
    cm = confusion_matrix(predictions, labels, n_classes)
    k = cm.shape[0]
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    prec = np.array([_safe_div(tp[c], pred_pos[c]) for c in range(k)])
    rec = np.array([_safe_div(tp[c], true_pos[c]) for c in range(k)])
    f1 = np.array([_safe_div(2 * p * r, p + r) for p, r in zip(prec, rec)])
    if k == 2:
        precision, recall, f1_score = prec[1], rec[1], f1[1]
    else:
        precision, recall, f1_score = prec.mean(), rec.mean(), f1.mean()
    return {
        "accuracy": _safe_div(tp.sum(), cm.sum()),
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1_score),
        "confusion": cm,
    }


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores for {labels.size} labels")
    if np.isnan(scores).any():
        raise DataError("scores contain NaN")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic ``(wins + ties / 2) / (P * N)`` via midranks."""
    scores, labels = _binary_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of recall gain times precision."""
    scores, labels = _binary_inputs(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def macro_one_vs_rest(metric, probs, labels, n_classes: int) -> float | None:
    """Mean of ``metric`` over classes that have both positives and negatives."""
    labels = np.asarray(labels)
    vals = []
    for c in range(n_classes):
        y = labels == c
        if y.any() and (~y).any():
            vals.append(metric(probs[:, c], y))
    return float(np.mean(vals)) if vals else None
