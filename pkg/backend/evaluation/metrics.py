"""
Behavior-level detection metrics.

A behavior is flagged when its score strictly exceeds the threshold. Ranking
ties are broken by original position.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np
from sklearn.metrics import roc_auc_score, roc_curve

logger = logging.getLogger(__name__)

DEFAULT_BUDGETS = (0.05, 0.10, 0.15)


def _as_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def budget_key(budget):
    return f"{round(budget * 100):g}%"


def _require_both_classes(scores, labels, what):
    scores, labels = _as_arrays(scores, labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError(f"{what} needs both classes")
    return scores, labels


def auc(scores, labels):
    """Area under the ROC curve, ties counted one half"""
    scores, labels = _require_both_classes(scores, labels, 'AUC')
    return float(roc_auc_score(labels, scores))


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    dr: float
    fpr: float


def confusion_at(scores, labels, tau) -> Confusion:
    scores, labels = _as_arrays(scores, labels)
    flagged = scores > tau
    anomalous = labels == 1
    tp = int((flagged & anomalous).sum())
    fp = int((flagged & ~anomalous).sum())
    fn = int((~flagged & anomalous).sum())
    tn = int((~flagged & ~anomalous).sum())
    dr = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return Confusion(tp, fp, tn, fn, dr, fpr)


def dr_at_budget(scores, labels, budget_fraction):
    """Share of all anomalies found among the top floor(budget * N) scored behaviors (at least one)"""
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError(f"Budget must lie in (0, 1], got {budget_fraction}")
    scores, labels = _as_arrays(scores, labels)
    total = int(labels.sum())
    if total == 0:
        raise ValueError("Detection rate needs at least one anomaly")
    inspected = max(1, math.floor(budget_fraction * labels.size + 1e-9))
    order = np.argsort(-scores, kind='stable')
    return int(labels[order[:inspected]].sum()) / total


def select_threshold(bag_scores, weak_labels, fallback=0.5):
    """
    Lowest unique bag score maximizing Youden's J = DR - FPR.

    Returns (threshold, source); source is 'fallback' when validation has a
    single class or no threshold beats chance.
    """
    scores, labels = _as_arrays(bag_scores, weak_labels)
    positive, negative = np.sort(scores[labels == 1]), np.sort(scores[labels == 0])
    if positive.size == 0 or negative.size == 0:
        logger.warning(f"Validation bags hold a single class; using threshold {fallback}")
        return fallback, 'fallback'
    candidates = np.unique(scores)
    dr = (positive.size - np.searchsorted(positive, candidates, side='right')) / positive.size
    fpr = (negative.size - np.searchsorted(negative, candidates, side='right')) / negative.size
    youden = dr - fpr
    best = int(np.argmax(youden))
    if youden[best] <= 0:
        logger.warning(f"No validation threshold beats chance; using threshold {fallback}")
        return fallback, 'fallback'
    return float(candidates[best]), 'validation'


def roc_points(scores, labels):
    """(thresholds, fpr, tpr) for every distinct operating point, from flag-nothing to flag-everything"""
    scores, labels = _require_both_classes(scores, labels, 'ROC curve')
    fpr, tpr, cutoffs = roc_curve(labels, scores, drop_intermediate=False)
    # roc_curve flags score >= cutoffs[i]; under strict > that point is reached at the next lower cutoff
    thresholds = np.concatenate([cutoffs[1:], [-np.inf]])
    return thresholds, fpr, tpr


@dataclass
class MetricsReport:
    auc: float
    dr: float
    fpr: float
    threshold: float
    threshold_source: str
    tp: int
    fp: int
    tn: int
    fn: int
    dr_at_budget: Dict[str, float] = field(default_factory=dict)
    sequence_auc: Optional[float] = None
    mean_distance_normal: Optional[float] = None
    mean_distance_anomalous: Optional[float] = None
    behaviors: int = 0
    sequences: int = 0
    score_dump: str = ''

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


def behavior_metrics(scores, labels, threshold, threshold_source, budgets=DEFAULT_BUDGETS, **extra) -> MetricsReport:
    confusion = confusion_at(scores, labels, threshold)
    return MetricsReport(
        auc=auc(scores, labels),
        dr=confusion.dr,
        fpr=confusion.fpr,
        threshold=threshold,
        threshold_source=threshold_source,
        tp=confusion.tp,
        fp=confusion.fp,
        tn=confusion.tn,
        fn=confusion.fn,
        dr_at_budget={budget_key(b): dr_at_budget(scores, labels, b) for b in sorted(budgets)},
        behaviors=int(np.asarray(labels).size),
        **extra,
    )
