"""Nested cross-validation over a detector hyperparameter grid."""

import logging
import warnings

import numpy as np

from ..detectors import detector_auc, fit_detector
from ..errors import ConfigError

logger = logging.getLogger(__name__)


def group_folds(groups, n_folds, seed=0):
    """Split unique group ids into ``n_folds`` random, nearly equal parts."""
    uniq = np.unique(groups)
    perm = np.random.default_rng(seed).permutation(uniq)
    return [np.isin(groups, part) for part in np.array_split(perm, n_folds)]


def tune_hyperparams(score_fn, grid, labels, groups=None, n_folds=3, seed=0):
    """Pick the grid value with the best mean inner-fold detection AUC.

    :param score_fn: ``value -> scores`` for every training item.
    :param grid: candidate values; ties go to the smallest.
    :param labels: 1 for adversarial items, 0 for benign.
    :param groups: items sharing a group stay in the same fold (e.g. a benign
        epoch and its adversarial twin). Defaults to one group per item.
    :returns: ``(best_value, {value: mean_auc})``. A value whose inner folds
        were all skipped scores NaN and is never chosen unless nothing else
        is available.
    """
    if len(grid) == 0:
        raise ConfigError("empty tuning grid")
    labels = np.asarray(labels)
    groups = np.arange(len(labels)) if groups is None else np.asarray(groups)
    folds = group_folds(groups, n_folds, seed)
    means = {}
    for value in sorted(grid):
        scores = np.asarray(score_fn(value), dtype=np.float64)
        aucs = []
        for i, val in enumerate(folds):
            fit = ~val
            if len(np.unique(labels[fit])) < 2 or len(np.unique(labels[val])) < 2:
                warnings.warn(f"inner fold {i} lacks one class; skipped", RuntimeWarning, stacklevel=2)
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                det = fit_detector(scores[fit & (labels == 0)], scores[fit & (labels == 1)], seed=seed)
            aucs.append(detector_auc(det, scores[val & (labels == 0)], scores[val & (labels == 1)]))
        means[value] = float(np.mean(aucs)) if aucs else float("nan")
    best = None
    for value in sorted(grid):
        m = means[value]
        if best is None or (np.isnan(means[best]) and not np.isnan(m)) or m > means[best]:
            best = value
    logger.debug("tuning: %s -> %s", means, best)
    return best, means
