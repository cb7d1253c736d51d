"""Classification accuracies and ROC-AUC."""

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def rca(predictions, labels):
    """Raw classification accuracy."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise DataError("predictions and labels differ in length")
    if y.size == 0:
        raise DataError("rca of an empty set")
    return float(np.mean(p == y))


def bca(predictions, labels, classes=None):
    """Unweighted mean of per-class recalls.

    ``classes`` lists the classes that must be present; by default the
    classes seen in ``labels``.
    """
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise DataError("predictions and labels differ in length")
    if y.size == 0:
        raise DataError("bca of an empty set")
    classes = np.unique(y) if classes is None else np.asarray(classes)
    recalls = []
    for c in classes:
        mask = y == c
        if not mask.any():
            raise DataError(f"class {c} absent from labels")
        recalls.append(np.mean(p[mask] == c))
    return float(np.mean(recalls))


def auc(scores_positive, scores_negative):
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(pos == neg).

    ``+inf`` scores are allowed and rank above every finite score.
    """
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DataError("auc needs nonempty positive and negative sets")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise DataError("auc scores contain NaN")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))
