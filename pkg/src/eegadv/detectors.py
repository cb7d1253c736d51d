"""Adversarial-example detection statistics and the logistic-regression detector.

Three scalar statistics are computed per input:

* Bayesian uncertainty (BU): the trace of the covariance of dropout-sampled
  softmax scores.
* Local intrinsic dimensionality (LID): maximum-likelihood estimate from the
  distances to the k nearest points of a reference batch of benign features.
* MD_max: the largest negative Mahalanobis distance to any class mean under a
  tied covariance, optionally after nudging the input toward its closest
  class mean (input calibration).

A one-feature logistic regression turns each statistic into a detector.
"""

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression

from . import model as M
from .errors import DataError, DegenerateGeometryError, NumericError, ParameterError
from .metrics import auc

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("BU", "LID", "MD_max")
FEATURE_LAYERS = ("penultimate", "logits")

# coincident neighbors are floored to this distance
MIN_DISTANCE = 1e-12


def extract_features(model, x, layer="penultimate"):
    if layer == "penultimate":
        return M.penultimate(model, x)
    if layer == "logits":
        return M.forward(model, x)
    raise ParameterError(f"feature layer must be one of {FEATURE_LAYERS}")


def _feature_vjp(model, x, grad, layer):
    if layer == "penultimate":
        return M.feature_gradient(model, x, grad)
    return M.logit_gradient(model, x, grad)


# -- Bayesian uncertainty --------------------------------------------------


def bu_from_scores(scores):
    """mean_i s_i.s_i - |mean_i s_i|^2 over the leading (pass) axis."""
    # shifting by the first pass leaves the value unchanged and makes
    # identical passes give exactly zero
    s = np.asarray(scores, dtype=np.float64)
    s = s - s[0]
    mean = s.mean(axis=0)
    bu = np.mean(np.sum(s * s, axis=-1), axis=0) - np.sum(mean * mean, axis=-1)
    return np.maximum(bu, 0.0)


def bu_score(model, x, n_passes=50, seed=0):
    """BU of one epoch (scalar) or a batch (array), from ``n_passes`` dropout samples."""
    if n_passes < 2:
        raise ParameterError("BU needs at least two stochastic passes")
    return bu_from_scores(M.stochastic_scores(model, x, n_passes, seed))


# -- local intrinsic dimensionality ----------------------------------------


@dataclass(frozen=True, eq=False)
class LidState:
    reference: np.ndarray
    k_neighbors: int = 20
    reference_ids: np.ndarray | None = None

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        if ref.ndim != 2:
            raise DataError("reference batch must be (B, d)")
        if self.k_neighbors < 2:
            raise ParameterError("LID needs k_neighbors >= 2")
        # one extra reference point covers self-exclusion
        if self.k_neighbors >= ref.shape[0]:
            raise ParameterError("k_neighbors must be smaller than the reference batch")
        object.__setattr__(self, "reference", ref)

    @property
    def batch_size(self):
        return self.reference.shape[0]

    def with_k(self, k):
        return LidState(self.reference, k, self.reference_ids)


def lid_fit(features, k_neighbors=20, batch_size=100, seed=0, ids=None):
    """Draw a reference batch of ``batch_size`` rows from benign ``features``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < batch_size:
        raise DataError(f"need {batch_size} reference features, have {features.shape[0]}")
    pick = np.sort(np.random.default_rng(seed).choice(features.shape[0], batch_size, replace=False))
    ref_ids = None if ids is None else np.asarray(ids)[pick]
    return LidState(features[pick], k_neighbors, ref_ids)


def lid_from_distances(distances, k):
    """LID = -1 / mean_i log(r_i / r_k) over the k smallest distances (rows).

    Returns +inf where all k distances are equal.
    """
    d = np.sort(np.atleast_2d(np.asarray(distances, dtype=np.float64)), axis=1)
    if d.shape[1] < k:
        raise ParameterError(f"need at least k={k} distances")
    r = d[:, :k]
    rk = r[:, -1]
    if np.any(rk <= 0):
        raise DegenerateGeometryError("k-th nearest neighbor coincides with the query")
    r = np.maximum(r, MIN_DISTANCE)
    mean_log = np.mean(np.log(r / rk[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        out = np.where(mean_log < 0, -1.0 / np.where(mean_log < 0, mean_log, -1.0), np.inf)
    return out if np.ndim(distances) > 1 else float(out[0])


def lid_score(features, state, ids=None):
    """LID of each feature row against the reference batch.

    If ``ids`` are given, a reference point with the same id as the query is
    skipped so that benign reference examples do not count themselves.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite feature")
    d = cdist(f, state.reference)
    if ids is not None and state.reference_ids is not None:
        same = np.asarray(ids)[:, None] == state.reference_ids[None, :]
        d[same] = np.inf
    out = lid_from_distances(d, state.k_neighbors)
    return out if np.ndim(features) > 1 else float(np.atleast_1d(out)[0])


# -- Mahalanobis confidence ------------------------------------------------


@dataclass(frozen=True, eq=False)
class MahalanobisState:
    class_means: np.ndarray
    shared_covariance: np.ndarray
    precision: np.ndarray
    noise_eps: float = 0.0
    ridge: float = 0.0


def mahalanobis_fit(features, labels, num_classes=None, ridge=1e-6, noise_eps=0.0):
    """Class means and the tied covariance (divisor N) of training features.

    The precision is ``inv(cov + lam*I)`` with ``lam = ridge * trace(cov) / dim``.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if f.ndim != 2 or y.shape != (f.shape[0],):
        raise DataError("features must be (N, d) with one label per row")
    k = int(y.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(y, minlength=k)
    if np.any(counts < 2):
        raise DataError(f"every class needs >= 2 samples, counts are {counts.tolist()}")
    means = np.stack([f[y == c].mean(axis=0) for c in range(k)])
    centered = f - means[y]
    cov = centered.T @ centered / f.shape[0]
    cov = 0.5 * (cov + cov.T)
    lam = ridge * np.trace(cov) / cov.shape[0]
    try:
        precision = np.linalg.inv(cov + lam * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise NumericError("tied covariance is singular; use ridge > 0") from None
    precision = 0.5 * (precision + precision.T)
    return MahalanobisState(means, cov, precision, noise_eps, lam)


def md_max_score(features, state):
    """Return ``(MD_max, closest_class)`` for feature rows (or a single row)."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite feature")
    diff = f[:, None, :] - state.class_means[None, :, :]
    md = -np.einsum("nkd,de,nke->nk", diff, state.precision, diff)
    c = np.argmax(md, axis=1)
    best = md[np.arange(len(f)), c]
    return (float(best[0]), int(c[0])) if single else (best, c)


def calibrate_input(x, model, state, eps_cal=None, layer="penultimate"):
    """x + eps_cal * sign(grad_x MD_max(x)), the gradient taken through the
    feature extractor toward the closest class mean."""
    eps_cal = state.noise_eps if eps_cal is None else eps_cal
    x = np.asarray(x, dtype=np.float64)
    if eps_cal == 0:
        return x.copy()
    f = extract_features(model, x, layer)
    _, c = md_max_score(f, state)
    diff = np.atleast_2d(f) - state.class_means[np.atleast_1d(c)]
    grad_f = -2.0 * diff @ state.precision
    grad_x = _feature_vjp(model, x, grad_f.reshape(np.shape(f)), layer)
    return x + eps_cal * np.sign(grad_x)


def md_scores(model, x, state, eps_cal=None, layer="penultimate"):
    """MD_max of (optionally calibrated) inputs."""
    xh = calibrate_input(x, model, state, eps_cal, layer)
    return md_max_score(extract_features(model, xh, layer), state)[0]


# -- logistic-regression detector ------------------------------------------


@dataclass(frozen=True)
class DetectorModel:
    """``decision(s) = weight * (s - center) / scale + bias``; positive means adversarial."""

    feature_kind: str
    weight: float
    bias: float
    center: float = 0.0
    scale: float = 1.0

    def decision(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        z = (s - self.center) / self.scale
        with np.errstate(invalid="ignore"):
            out = self.weight * z + self.bias
        # +inf scores with a zero weight
        return np.where(np.isnan(out), self.bias, out)

    def predict(self, scores):
        return (self.decision(scores) > 0).astype(np.int64)


def _finite(values, fill):
    v = np.asarray(values, dtype=np.float64)
    return np.where(np.isposinf(v), fill, v)


def fit_detector(scores_benign, scores_adversarial, feature_kind="", seed=0, balance=True):
    """Fit a one-feature logistic regression (adversarial = 1).

    With ``balance`` the larger class is subsampled to the size of the
    smaller one. Infinite LID scores are replaced by a value above every
    finite score for the fit only.
    """
    b = np.asarray(scores_benign, dtype=np.float64).ravel()
    a = np.asarray(scores_adversarial, dtype=np.float64).ravel()
    if b.size == 0 or a.size == 0:
        raise DataError("detector needs benign and adversarial scores")
    if balance and b.size != a.size:
        rng = np.random.default_rng(seed)
        n = min(b.size, a.size)
        if b.size > n:
            b = b[np.sort(rng.choice(b.size, n, replace=False))]
        else:
            a = a[np.sort(rng.choice(a.size, n, replace=False))]
    s = np.concatenate([b, a])
    finite = s[np.isfinite(s)]
    if finite.size == 0:
        finite = np.zeros(1)
    hi, lo = finite.max(), finite.min()
    s = _finite(s, hi + (hi - lo) + 1.0)
    center, scale = float(s.mean()), float(s.std())
    labels = np.r_[np.zeros(b.size), np.ones(a.size)]
    if scale == 0:
        warnings.warn(f"{feature_kind or 'detector'} scores are all equal; detector is uninformative",
                      RuntimeWarning, stacklevel=2)
        return DetectorModel(feature_kind, 0.0, 0.0, center, 1.0)
    lr = LogisticRegression(C=1.0)
    lr.fit(((s - center) / scale)[:, None], labels)
    return DetectorModel(feature_kind, float(lr.coef_[0, 0]), float(lr.intercept_[0]), center, scale)


def detector_auc(detector, scores_benign, scores_adversarial):
    """AUC of the detector's decision scores, adversarial as the positive class."""
    return auc(detector.decision(scores_adversarial), detector.decision(scores_benign))


SCORE_FIELDS = ("example_id", "feature_kind", "score", "is_adversarial", "attack_name")


def export_scores_csv(path, ids, feature_kind, scores, is_adversarial, attack_name=""):
    """One CSV row per scored example."""
    adv = np.broadcast_to(np.asarray(is_adversarial, dtype=bool), np.shape(scores))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for i, s, a in zip(ids, np.asarray(scores, dtype=np.float64), adv):
            w.writerow((int(i), feature_kind, repr(float(s)), int(a), attack_name))
