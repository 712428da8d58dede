"""Threshold metrics and a rank-based ROC AUC."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

THRESHOLD = 0.5


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; ``None`` if a class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = THRESHOLD

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_scores(scores, labels, threshold: float = THRESHOLD) -> MetricsReport:
    """Predict 1 iff score > threshold (strict), then tabulate."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("no scores to evaluate")
    pred = scores > threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return MetricsReport(
        accuracy=(tp + tn) / scores.size,
        auc=roc_auc(scores, labels),
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
    )


METRIC_NAMES = ("accuracy", "auc", "sensitivity", "specificity")


def summarize(reports) -> dict:
    """Mean and sample standard deviation per metric over the defined values."""
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    return {"mean": mean, "std": std}
