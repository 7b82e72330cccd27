"""Rank-based AUC, step-interpolated average precision and macro F1."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie) over all cross-class pairs."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(s)  # average ranks give the half-credit for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over distinct score thresholds (descending) of (R_k - R_{k-1}) * P_k.

    Tied scores are one threshold.
    """
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last_of_tie]
    predicted = last_of_tie + 1
    precision = tp / predicted
    recall = tp / n_pos
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def f1_macro(predictions, labels) -> float:
    p = np.asarray(predictions).ravel().astype(np.int64)
    y = np.asarray(labels).ravel().astype(np.int64)
    if p.shape != y.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    f1s = []
    for c in (0, 1):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 or tp == 0 else 2.0 * tp / denom)
    return float(np.mean(f1s))


def score_report(fraud_scores, labels, threshold: float = 0.5) -> dict:
    """AUC, AP and F1-macro; a score exactly at ``threshold`` counts as benign."""
    s = np.asarray(fraud_scores, dtype=np.float64)
    return {
        "auc": auc(s, labels),
        "ap": average_precision(s, labels),
        "f1_macro": f1_macro((s > threshold).astype(np.int64), labels),
    }
