"""Detection and correlation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import RejectedInput


def _vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise RejectedInput(f"{name} is empty")
    return v


def auroc(scores_negative, scores_positive) -> float:
    """Probability that a positive (OOD) score exceeds a negative (ID) one, ties counted half.

    Computed from the Mann-Whitney U statistic on mid-ranks, which equals the
    pairwise definition exactly.
    """
    neg = _vector(scores_negative, "scores_negative")
    pos = _vector(scores_positive, "scores_positive")
    ranks = rankdata(np.concatenate([neg, pos]))
    n_pos = pos.size
    u = ranks[neg.size :].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * neg.size))


def roc_points(scores_negative, scores_positive) -> np.ndarray:
    """(fpr, tpr, threshold) rows, one per distinct score, thresholds descending."""
    neg = _vector(scores_negative, "scores_negative")
    pos = _vector(scores_positive, "scores_positive")
    thresholds = np.unique(np.concatenate([neg, pos]))[::-1]
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    # predict positive iff score >= threshold
    tpr = (pos.size - np.searchsorted(pos_sorted, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    rows = np.column_stack([fpr, tpr, thresholds])
    return np.vstack([[0.0, 0.0, np.inf], rows])


@dataclass
class DetectionReport:
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    auroc: float
    threshold_used: float
    undefined: tuple[str, ...] = ()

    def as_row(self) -> dict:
        row = asdict(self)
        row["undefined"] = "|".join(self.undefined)
        return row


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def confusion(scores, labels, threshold: float) -> DetectionReport:
    """Confusion statistics for ``predict OOD iff score > threshold``.

    ``labels`` are truthy for OOD samples.  Rates with a zero denominator are
    reported as 0 and listed in ``undefined``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise RejectedInput("scores and labels differ in length")
    pred = s > threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    accuracy = _ratio(tp + tn, s.size, "accuracy", undefined)
    if y.any() and (~y).any():
        auc = auroc(s[~y], s[y])
    else:
        undefined.append("auroc")
        auc = 0.0
    return DetectionReport(tp, tn, fp, fn, precision, recall, f1, accuracy, auc, float(threshold), tuple(undefined))


def pearson(x, y) -> float:
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise RejectedInput("pearson needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise RejectedInput("zero variance")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of fractional (mid) ranks."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise RejectedInput("spearman needs two equal-length vectors of length >= 2")
    return pearson(rankdata(a), rankdata(b))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "max": float(v.max()),
        "n": int(v.size),
    }
