"""ROC analysis, accuracy and run aggregation.

Higher scores always mean "more target".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ROCCurve:
    """Operating points from the strictest to the loosest threshold.

    ``thresholds[j]`` is the score cut for point ``j + 1``; point 0 is the
    (0, 0) corner, which corresponds to an infinite threshold.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1])) / 2)


def roc(scores, labels) -> ROCCurve:
    """Threshold sweep over the distinct scores.

    Instances sharing a score enter together, giving a diagonal segment whose
    trapezoid area matches the rank-statistic convention for ties.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1, True, False)).all():
        raise ValueError("labels must be binary")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")

    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return ROCCurve(s[last], fpr, tpr)


def auc_score(scores, labels) -> float:
    return roc(scores, labels).auc


def tpr_at_fpr(curve: ROCCurve, fpr: float) -> float:
    """TPR at a given false-positive rate, linear between operating points.

    Where the curve is vertical at ``fpr`` the highest TPR is returned.
    """
    if not 0.0 <= fpr <= 1.0:
        raise ValueError("fpr must lie in [0, 1]")
    x, y = curve.fpr, curve.tpr
    hi = np.searchsorted(x, fpr, side="right")
    if hi < x.size and x[hi - 1] == fpr:
        return float(y[hi - 1])
    if hi == x.size:
        return float(y[-1])
    lo = hi - 1
    frac = (fpr - x[lo]) / (x[hi] - x[lo])
    return float(y[lo] + frac * (y[hi] - y[lo]))


def multiclass_accuracy(pred, truth, classes=None):
    """Return ``(accuracy, confusion)`` with rows indexing the true class.

    ``classes`` fixes the class set and the row/column order; by default it is
    the sorted set of labels in ``truth``.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    classes = np.unique(truth) if classes is None else np.asarray(classes)
    index = {c: i for i, c in enumerate(classes.tolist())}
    C = np.zeros((classes.size, classes.size), dtype=int)
    for p, t in zip(pred.tolist(), truth.tolist()):
        if p not in index or t not in index:
            raise ValueError(f"label outside the class set: {p if p not in index else t!r}")
        C[index[t], index[p]] += 1
    acc = float(np.trace(C) / pred.size) if pred.size else float("nan")
    return acc, C


def average_runs(run_results: Sequence[Mapping[str, float]]) -> dict:
    """Per-metric mean and sample standard deviation (0 for a single run)."""
    if not run_results:
        raise ValueError("no runs to average")
    keys = list(run_results[0])
    for r in run_results[1:]:
        if list(r) != keys and set(r) != set(keys):
            raise ValueError("runs report different metrics")
    out = {}
    for k in keys:
        v = np.array([r[k] for r in run_results], dtype=float)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out[k] = (float(v.mean()), std)
    return out
