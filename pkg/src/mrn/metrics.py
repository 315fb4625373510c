"""Classification metrics: accuracy, macro F1 and rank-sum ROC AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney ROC AUC with average ranks for ties; ``None`` for single-class input."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(pred, labels, num_classes: int = 2) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def macro_f1(pred, labels, num_classes: int = 2) -> float:
    cm = confusion(pred, labels, num_classes)
    f1s = []
    for k in range(num_classes):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


@dataclass
class MetricsReport:
    accuracy: float
    roc_auc: float | None
    f1: float
    counts: dict

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(p_pd, labels, threshold: float = 0.5) -> MetricsReport:
    """Metrics from PD probabilities; the predicted class is PD iff ``p_pd > threshold``."""
    p_pd = np.asarray(p_pd, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    pred = (p_pd > threshold).astype(int)
    counts = {"HC": int((labels == 0).sum()), "PD": int((labels == 1).sum())}
    acc = float((pred == labels).mean()) if labels.size else float("nan")
    return MetricsReport(acc, roc_auc(p_pd, labels), macro_f1(pred, labels), counts)
