"""Task metrics. All return plain floats; inputs are array-likes."""

from __future__ import annotations

from typing import Callable

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _same_length(pred, gold):
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape[0] != gold.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions for {gold.shape[0]} gold labels")
    if pred.shape[0] == 0:
        raise ValueError("no samples")
    return pred, gold


def accuracy(pred, gold) -> float:
    """Exact-match fraction; for label matrices a row must match entirely."""
    pred, gold = _same_length(pred, gold)
    if pred.ndim == 1:
        return float(np.mean(pred == gold))
    return float(np.mean(np.all(pred == gold, axis=1)))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    # no positives predicted or present: nothing was got wrong
    return 1.0 if denom == 0 else 2 * tp / denom


def binary_f1(pred, gold, positive=1) -> float:
    pred, gold = _same_length(pred, gold)
    p, g = pred == positive, gold == positive
    return _f1(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def _as_indicator(pred, gold):
    if pred.ndim == 2:
        return pred.astype(bool), gold.astype(bool)
    classes = np.union1d(np.unique(pred), np.unique(gold))
    return pred[:, None] == classes[None], gold[:, None] == classes[None]


def weighted_f1(pred, gold) -> float:
    """Support-weighted mean of per-label F1.

    Accepts 0/1 label matrices (multi-label) or class vectors (one-vs-rest
    per class). Support is the number of gold positives per label.
    """
    pred, gold = _same_length(pred, gold)
    p, g = _as_indicator(pred, gold)
    support = g.sum(axis=0)
    if support.sum() == 0:
        raise UndefinedMetricError("weighted F1 needs at least one gold positive")
    tp = (p & g).sum(axis=0)
    fp = (p & ~g).sum(axis=0)
    fn = (~p & g).sum(axis=0)
    per_label = np.array([_f1(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)])
    return float(np.sum(per_label * support) / support.sum())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0:
        raise UndefinedMetricError("correlation of a constant sequence")
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def spearman(pred, gold) -> float:
    """Rank correlation with average ranks for ties."""
    pred, gold = _same_length(np.asarray(pred, float), np.asarray(gold, float))
    if len(gold) < 2:
        raise UndefinedMetricError("spearman needs at least two samples")
    if np.all(gold == gold[0]):
        raise UndefinedMetricError("spearman undefined for constant gold values")
    return _pearson(_average_ranks(pred), _average_ranks(gold))


def r2(pred, gold) -> float:
    pred, gold = _same_length(np.asarray(pred, float), np.asarray(gold, float))
    if len(gold) < 2:
        raise UndefinedMetricError("r2 needs at least two samples")
    ss_tot = np.sum((gold - gold.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("r2 undefined for constant gold values")
    return float(1 - np.sum((gold - pred) ** 2) / ss_tot)


def one_minus_wmae(pred, gold, scale: float = 1.0) -> float:
    """1 minus the class-averaged mean absolute error on ordinal labels.

    The MAE is taken within each gold class and then averaged over classes,
    which weights every example by the inverse of its class frequency.
    ``scale`` divides the errors (e.g. the width of the rating range).
    """
    pred, gold = _same_length(np.asarray(pred, float), np.asarray(gold, float))
    per_class = [np.mean(np.abs(pred[gold == c] - c)) for c in np.unique(gold)]
    return float(1 - np.mean(per_class) / scale)


METRICS: dict[str, Callable[..., float]] = {
    "accuracy": accuracy,
    "binary_f1": binary_f1,
    "weighted_f1": weighted_f1,
    "spearman": spearman,
    "r2": r2,
    "one_minus_wmae": one_minus_wmae,
}

# task kinds each metric makes sense for
METRIC_KINDS = {
    "accuracy": {"single_label", "multi_label"},
    "binary_f1": {"single_label"},
    "weighted_f1": {"single_label", "multi_label"},
    "spearman": {"regression"},
    "r2": {"regression"},
    "one_minus_wmae": {"regression"},
}


def evaluate_metric(pred, gold, metric: str, **kwargs) -> float:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    return METRICS[metric](pred, gold, **kwargs)
