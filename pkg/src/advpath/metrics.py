"""Classification metrics."""

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ContractError(f"predictions {predictions.shape} and labels {labels.shape} must be equal-length vectors")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predictions == labels))


def auc_roc(scores, labels):
    """Area under the ROC curve in its Mann-Whitney form.

    Equals the fraction of (positive, negative) pairs where the positive
    scores higher, with ties counted as one half.  Computed from mid-ranks,
    so the numerator is an exact half-integer.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ContractError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
