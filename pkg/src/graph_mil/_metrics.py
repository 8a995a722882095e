from __future__ import annotations

import warnings

from collections.abc import Sequence

import numpy as np

from numpy.typing import ArrayLike
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score
from sklearn.metrics import balanced_accuracy_score
from sklearn.metrics import f1_score
from sklearn.metrics import precision_score
from sklearn.metrics import recall_score

from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilShapeError


METRIC_NAMES = ("auc", "ba", "f1", "precision", "recall", "accuracy")
MetricValues = dict[str, float | None]


class MetricsReport(BaseModel):
    """Metrics of one evaluation; ``auc`` is None when a class is missing."""

    model_config = ConfigDict(frozen=True)

    auc: float | None = Field(default=None, ge=0.0, le=1.0)
    ba: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)

    def values(self) -> MetricValues:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def auc_brute_force(scores: ArrayLike, labels: ArrayLike) -> float | None:
    """Share of (positive, negative) pairs ranked correctly; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    positives = s[y == 1]
    negatives = s[y == 0]
    if positives.size == 0 or negatives.size == 0:
        return None
    wins = (positives[:, None] > negatives[None, :]).sum()
    ties = (positives[:, None] == negatives[None, :]).sum()
    return float((wins + 0.5 * ties) / (positives.size * negatives.size))


def auc(scores: ArrayLike, labels: ArrayLike) -> float | None:
    """
    ROC AUC through the Mann-Whitney rank sum. Average ranks make ties count one
    half, so the value equals :func:`auc_brute_force` exactly.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise GraphMilShapeError(f"{s.size} scores but {y.size} labels.")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_scores(
    scores: ArrayLike, labels: ArrayLike, threshold: float = 0.5
) -> MetricsReport:
    """Score probabilities against {0, 1} labels; ``score >= threshold`` is positive."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.size == 0:
        raise GraphMilDataError("Cannot evaluate an empty test set.")
    if s.shape != y.shape:
        raise GraphMilShapeError(f"{s.size} scores but {y.size} labels.")
    predicted = (s >= threshold).astype(np.int64)

    with warnings.catch_warnings():
        # One-class test sets make a per-class recall undefined; it is dropped.
        warnings.simplefilter("ignore")
        ba = balanced_accuracy_score(y, predicted)
    return MetricsReport(
        auc=auc(s, y),
        ba=float(ba),
        f1=float(f1_score(y, predicted, zero_division=0)),
        precision=float(precision_score(y, predicted, zero_division=0)),
        recall=float(recall_score(y, predicted, zero_division=0)),
        accuracy=float(accuracy_score(y, predicted)),
    )


def summarize(reports: Sequence[MetricsReport]) -> tuple[MetricValues, MetricValues]:
    """Mean and population std (ddof=0) per metric; absent AUCs are skipped."""
    means: MetricValues = {}
    stds: MetricValues = {}
    for name in METRIC_NAMES:
        values = [v for r in reports if (v := getattr(r, name)) is not None]
        if values:
            means[name] = float(np.mean(values))
            stds[name] = float(np.std(values))
        else:
            means[name] = stds[name] = None
    return means, stds


def difference(
    after: MetricsReport, before: MetricsReport
) -> MetricValues:
    """Per-metric ``after - before``; None where either side lacks the metric."""
    out: MetricValues = {}
    for name in METRIC_NAMES:
        a, b = getattr(after, name), getattr(before, name)
        out[name] = None if a is None or b is None else a - b
    return out
