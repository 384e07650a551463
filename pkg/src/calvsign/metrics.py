"""Detection metrics with pre-calving as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import ContractError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.size == 0:
        raise ContractError("no scores to evaluate")
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    flags: tuple = ()  # names of metrics that were 0/0 and reported as 0

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def precision_recall_f1(c: ConfusionCounts) -> PRF:
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    p = ratio(c.tp, c.tp + c.fp, "precision")
    r = ratio(c.tp, c.tp + c.fn, "recall")
    f = ratio(2 * p * r, p + r, "f1")
    return PRF(p, r, f, tuple(flags))


def false_positive_rate(c: ConfusionCounts) -> float:
    return c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float]]]:
    """Trapezoidal AUC over every distinct threshold, ties grouped.

    Returns ``(auc, roc)`` with ROC points running from (0, 0) to (1, 1).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.size == 0:
        raise ContractError("scores and labels must be non-empty and aligned")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y == 1)[ends]
    fps = np.cumsum(y == 0)[ends]
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def mann_whitney_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by direct pair enumeration."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def summarize(scores, labels, threshold: float = 0.5) -> dict:
    counts = confusion_counts(scores, labels, threshold)
    prf = precision_recall_f1(counts)
    out = {
        "confusion": counts.to_dict(),
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
        "fpr": false_positive_rate(counts),
        "flags": list(prf.flags),
    }
    labels = np.asarray(labels)
    if (labels == 1).any() and (labels == 0).any():
        out["auc"], out["roc"] = roc_auc(scores, labels)
    else:
        out["auc"], out["roc"] = None, []
    return out
