"""
Evaluation Metrics
Macro F1 and one-vs-rest ROC-AUC for single-label multiclass predictions,
plus mean / population-std aggregation over seeds.
"""

import logging
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import f1_score, roc_auc_score

from src.errors import DimensionError, DomainError, UndefinedMetricError


logger = logging.getLogger(__name__)


def _check_labels(labels: np.ndarray, num_classes: int, name: str):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"{name} must lie in [0, {num_classes})")


def f1_macro(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over all classes; absent classes count as 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise UndefinedMetricError("f1_macro of an empty prediction set")
    _check_labels(y_true, num_classes, "y_true")
    _check_labels(y_pred, num_classes, "y_pred")
    return float(f1_score(y_true, y_pred, labels=list(range(num_classes)),
                          average="macro", zero_division=0))


def auc_ovr(y_true, class_scores, num_classes: int) -> float:
    """
    One-vs-rest ROC-AUC per class (ties count one half), macro-averaged over
    classes that have both positives and negatives.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    class_scores = np.asarray(class_scores, dtype=np.float64)
    if class_scores.shape != (y_true.size, num_classes):
        raise DimensionError(f"Scores shape {class_scores.shape} does not match ({y_true.size}, {num_classes})")
    _check_labels(y_true, num_classes, "y_true")

    per_class = []
    for c in range(num_classes):
        positives = y_true == c
        if positives.all() or not positives.any():
            logger.debug("Skipping class %d in AUC: no positives or no negatives", c)
            continue
        per_class.append(roc_auc_score(positives, class_scores[:, c]))

    if not per_class:
        raise UndefinedMetricError("AUC undefined: every class lacks positives or negatives")
    return float(np.mean(per_class))


def aggregate_over_seeds(frame: pd.DataFrame, group_columns: Sequence[str],
                         value_columns: Sequence[str]) -> pd.DataFrame:
    """Mean and population std (ddof=0) of each value column per group."""
    grouped = frame.groupby(list(group_columns), sort=True)[list(value_columns)]
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    counts = grouped.size().rename("num_seeds")
    return pd.concat([means, stds, counts], axis=1).reset_index()
