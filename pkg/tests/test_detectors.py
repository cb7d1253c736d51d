import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegadv import detectors as D
from eegadv import model as M
from eegadv.errors import DataError, DegenerateGeometryError, ParameterError
from eegadv.metrics import auc

from conftest import random_model
from oracles import lid_by_hand, naive_covariance

finite = st.floats(-10, 10, allow_nan=False)


# -- BU ----------------------------------------------------------------------


def test_bu_two_pass_hand_value():
    assert D.bu_from_scores(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7, 4), elements=st.floats(0, 1)))
def test_bu_equals_sum_of_class_variances(scores):
    assert abs(D.bu_from_scores(scores) - np.var(scores, axis=0).sum()) < 1e-12


def test_bu_zero_without_dropout():
    m = random_model(1, dropout=0.0)
    x = np.random.default_rng(0).normal(size=(5, 2, 9))
    assert np.all(D.bu_score(m, x, 10, seed=0) == 0)


def test_bu_identity_on_model_scores():
    m = random_model(2, dropout=0.5)
    x = np.random.default_rng(1).normal(size=(4, 2, 9))
    s = M.stochastic_scores(m, x, 30, 7)
    expected = np.var(s, axis=0).sum(axis=-1)
    np.testing.assert_allclose(D.bu_score(m, x, 30, seed=7), expected, rtol=0, atol=1e-12)
    assert np.all(expected >= 0) and np.any(expected > 0)


def test_bu_needs_two_passes(tiny_model):
    with pytest.raises(ParameterError):
        D.bu_score(tiny_model, np.zeros((2, 9)), n_passes=1)


# -- LID ---------------------------------------------------------------------


def test_lid_hand_example():
    value = D.lid_from_distances([1.0, 2.0, 4.0, 8.0], 4)
    assert value == pytest.approx(1 / (1.5 * math.log(2)), abs=1e-12)
    assert abs(value - 0.96179) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=6, max_size=30, unique=True), st.integers(2, 6))
def test_lid_matches_hand_evaluation(distances, k):
    if len(set(sorted(distances)[:k])) < 2:
        return
    assert abs(D.lid_from_distances(distances, k) - lid_by_hand(distances, k)) < 1e-9


def test_lid_kth_neighbor_coincident_is_error():
    with pytest.raises(DegenerateGeometryError):
        D.lid_from_distances([0.0, 0.0, 0.0, 1.0], 3)


def test_lid_all_equal_distances_is_infinite_and_ranks_first():
    assert D.lid_from_distances([2.0, 2.0, 2.0], 3) == math.inf
    assert auc([math.inf], [1.0, 5.0]) == 1.0


def test_lid_line_segment_has_dimension_near_one():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=8)
    ref = rng.uniform(0, 1, (100, 1)) * direction
    queries = rng.uniform(0, 1, (200, 1)) * direction
    state = D.LidState(ref, 20)
    median = np.median(D.lid_score(queries, state))
    assert 0.5 <= median <= 2.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_lid_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    ref, q = rng.normal(size=(30, 4)), rng.normal(size=(5, 4))
    a = D.lid_score(q, D.LidState(ref, 10))
    b = D.lid_score(lam * q, D.LidState(lam * ref, 10))
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_lid_increases_with_intrinsic_dimension():
    rng = np.random.default_rng(3)
    medians = []
    for d in (1, 2, 5):
        basis = np.linalg.qr(rng.normal(size=(12, d)))[0].T
        ref = rng.normal(size=(100, d)) @ basis
        q = rng.normal(size=(300, d)) @ basis
        medians.append(np.median(D.lid_score(q, D.LidState(ref, 20))))
    assert medians[0] < medians[1] < medians[2]


def test_lid_skips_own_reference_point():
    ref = np.arange(12, dtype=float)[:, None] ** 1.5
    state = D.LidState(ref, 3, np.arange(12))
    with_self = D.lid_score(ref[5:6], D.LidState(ref, 3))
    assert np.isinf(with_self) or with_self > 0
    excluded = D.lid_score(ref[5:6], state, ids=np.array([5]))
    distances = np.delete(np.abs(ref[:, 0] - ref[5, 0]), 5)
    assert excluded[0] == pytest.approx(lid_by_hand(distances, 3), abs=1e-12)


def test_lid_state_validation():
    with pytest.raises(ParameterError):
        D.LidState(np.zeros((5, 2)), 5)
    with pytest.raises(ParameterError):
        D.LidState(np.zeros((5, 2)), 1)
    with pytest.raises(DataError):
        D.lid_fit(np.zeros((10, 2)), 3, batch_size=100)


# -- Mahalanobis -------------------------------------------------------------


def test_mahalanobis_single_class_hand_example():
    s = D.mahalanobis_fit(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0, 0]), ridge=0.1)
    np.testing.assert_array_equal(s.class_means, [[1.0, 0.0]])
    np.testing.assert_array_equal(s.shared_covariance, [[1.0, 0.0], [0.0, 0.0]])


def test_mahalanobis_matches_double_loop_covariance():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(60, 5)) + rng.normal(size=5)
    y = rng.integers(0, 3, 60)
    s = D.mahalanobis_fit(f, y, 3)
    means, cov = naive_covariance(f, y)
    np.testing.assert_allclose(s.class_means, means, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s.shared_covariance, cov, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s.precision, s.precision.T, atol=0)
    assert np.all(np.linalg.eigvalsh(s.precision) > 0)


def test_mahalanobis_duplication_invariant():
    rng = np.random.default_rng(1)
    f, y = rng.normal(size=(20, 3)), np.repeat([0, 1], 10)
    a = D.mahalanobis_fit(f, y)
    b = D.mahalanobis_fit(np.vstack([f, f]), np.r_[y, y])
    np.testing.assert_allclose(a.class_means, b.class_means, atol=1e-14)
    np.testing.assert_allclose(a.shared_covariance, b.shared_covariance, atol=1e-14)


def test_mahalanobis_needs_two_per_class():
    with pytest.raises(DataError):
        D.mahalanobis_fit(np.zeros((3, 2)), np.array([0, 0, 1]))


def test_md_max_hand_example():
    state = D.MahalanobisState(np.array([[0.0, 0.0], [4.0, 0.0]]), np.eye(2), np.eye(2))
    md, c = D.md_max_score(np.array([1.0, 0.0]), state)
    assert md == -1.0
    assert c == 0  # the first class


def test_md_max_zero_at_class_mean():
    rng = np.random.default_rng(2)
    f, y = rng.normal(size=(30, 3)), np.repeat([0, 1, 2], 10)
    s = D.mahalanobis_fit(f, y)
    md, c = D.md_max_score(s.class_means, s)
    np.testing.assert_array_equal(md, 0.0)
    np.testing.assert_array_equal(c, [0, 1, 2])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), st.integers(0, 1000))
def test_md_max_nonpositive(queries, seed):
    rng = np.random.default_rng(seed)
    s = D.mahalanobis_fit(rng.normal(size=(20, 3)), np.repeat([0, 1], 10))
    assert np.all(D.md_max_score(queries, s)[0] <= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_md_max_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    f, y = rng.normal(size=(40, 3)), np.repeat([0, 1], 20)
    q = rng.normal(size=(8, 3))
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    before = D.md_max_score(q, D.mahalanobis_fit(f, y, ridge=0.0))[0]
    after = D.md_max_score(q @ A.T + b, D.mahalanobis_fit(f @ A.T + b, y, ridge=0.0))[0]
    np.testing.assert_allclose(after, before, rtol=1e-8, atol=1e-8)


# -- input calibration -------------------------------------------------------


def identity_features(d):
    """Model whose logits equal the flattened input."""
    return M.make_classifier([M.flatten(), M.dense(d)], [{}, {"W": np.eye(d), "b": np.zeros(d)}], (1, d))


def test_calibration_zero_eps_is_identity(tiny_model):
    x = np.random.default_rng(0).normal(size=(3, 2, 9))
    s = D.mahalanobis_fit(M.penultimate(tiny_model, x.repeat(3, 0) + 0.1 * np.arange(9)[:, None, None] ** 0.5),
                          np.repeat([0, 1, 2], 3))
    np.testing.assert_array_equal(D.calibrate_input(x, tiny_model, s, 0.0), x)


def test_calibration_linear_case_moves_toward_mean():
    mu = np.array([0.5, -1.0, 2.0])
    state = D.MahalanobisState(mu[None, :], np.eye(3), np.eye(3))
    x = np.array([[[1.0, -3.0, 0.0]]])
    xh = D.calibrate_input(x, identity_features(3), state, 0.01, layer="logits")
    np.testing.assert_allclose(xh - x, 0.01 * -np.sign(x - mu), rtol=0, atol=1e-15)


def test_calibration_increases_mean_md():
    m = random_model(4, input_shape=(2, 9), num_classes=3, dropout=0.0)
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(90, 2, 9))
    s = D.mahalanobis_fit(M.penultimate(m, xs), m.predict(xs), 3, ridge=1e-3)
    x = rng.normal(size=(50, 2, 9))
    before = D.md_scores(m, x, s, 0.0)
    after = D.md_scores(m, x, s, 1e-3)
    assert after.mean() >= before.mean()


# -- logistic-regression detector --------------------------------------------


def test_detector_separable_training_accuracy():
    benign, adv = np.arange(10.0), np.arange(20.0, 30.0)
    det = D.fit_detector(benign, adv, "LID")
    assert np.all(det.predict(benign) == 0) and np.all(det.predict(adv) == 1)


def test_detector_auc_equals_raw_auc():
    rng = np.random.default_rng(0)
    benign, adv = rng.normal(size=80), rng.normal(0.7, 1, 80)
    det = D.fit_detector(benign, adv, "BU")
    raw = auc(adv, benign)
    assert D.detector_auc(det, benign, adv) == pytest.approx(max(raw, 1 - raw), abs=1e-12)


def test_detector_label_swap_flips_weight():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=50), rng.normal(1, 1, 50)
    w1, w2 = D.fit_detector(a, b).weight, D.fit_detector(b, a).weight
    assert np.sign(w1) == -np.sign(w2) != 0


def test_detector_degenerate_warns_and_is_chance():
    with pytest.warns(RuntimeWarning):
        det = D.fit_detector(np.ones(5), np.ones(5))
    assert D.detector_auc(det, np.ones(5), np.ones(5)) == 0.5


def test_detector_handles_infinite_lid():
    det = D.fit_detector([1.0, 2.0, 3.0], [4.0, np.inf, 5.0])
    assert D.detector_auc(det, [1.0, 2.0, 3.0], [4.0, np.inf, 5.0]) == 1.0


def test_detector_needs_both_sets():
    with pytest.raises(DataError):
        D.fit_detector([], [1.0])


def test_detector_balances_classes():
    det = D.fit_detector(np.zeros(100), np.ones(10))
    assert det.center == 0.5


def test_export_scores_csv(tmp_path):
    path = tmp_path / "scores.csv"
    D.export_scores_csv(path, [3, 4], "LID", [1.5, np.inf], [False, True], "pgd")
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == list(D.SCORE_FIELDS)
    assert rows[1] == {"example_id": "4", "feature_kind": "LID", "score": "inf",
                       "is_adversarial": "1", "attack_name": "pgd"}
