import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegadv import model as M
from eegadv.errors import ConfigError, DataError, HeaderError, InputShapeError, LabelError, ParameterError

from conftest import linear_model, random_model
from oracles import fd_input_gradient, naive_forward


def test_zero_head_gives_zero_logits():
    m = random_model(1)
    params = [dict(p) for p in m.params]
    params[-1] = {"W": np.zeros_like(params[-1]["W"]), "b": np.zeros_like(params[-1]["b"])}
    z = M.make_classifier(m.layers, params, m.input_shape)
    x = np.random.default_rng(0).normal(size=m.input_shape)
    assert np.array_equal(M.forward(z, x), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_evaluator(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed + 100).normal(size=m.input_shape)
    np.testing.assert_allclose(M.forward(m, x), naive_forward(m, x), rtol=1e-10, atol=1e-12)


def test_batched_forward_matches_single():
    m = random_model(2)
    xs = np.random.default_rng(3).normal(size=(4,) + m.input_shape)
    batch = M.forward(m, xs)
    for i in range(4):
        np.testing.assert_allclose(batch[i], M.forward(m, xs[i]), rtol=1e-13)


def test_stochastic_forward_is_seeded():
    m = random_model(3)
    x = np.ones(m.input_shape)
    a = M.forward(m, x, "stochastic", 7)
    b = M.forward(m, x, "stochastic", 7)
    assert np.array_equal(a, b)
    with pytest.raises(ParameterError):
        M.forward(m, x, "stochastic")


def test_deterministic_forward_is_pure():
    m = random_model(4)
    x = np.random.default_rng(0).normal(size=m.input_shape)
    assert np.array_equal(M.forward(m, x), M.forward(m, x))


def test_shape_mismatch_raises():
    m = random_model(0)
    with pytest.raises(InputShapeError):
        M.forward(m, np.zeros((3, 9)))


def test_softmax_examples():
    np.testing.assert_allclose(M.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(M.softmax(np.array([np.log(3.0), 0.0])), [0.75, 0.25], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=6))
def test_softmax_normalized_and_argmax_preserving(logits):
    p = M.softmax(np.array(logits))
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)
    assert p[np.argmax(logits)] == p.max()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed, input_shape=(2, 7))
    x = rng.normal(size=m.input_shape)
    y = int(rng.integers(3))
    g = M.input_gradient(m, x, y)
    fd = fd_input_gradient(lambda v: M.cross_entropy(m, v, y)[0], x)
    assert np.all(np.abs(g - fd) <= np.maximum(1e-5, 1e-3 * np.abs(fd)))


def test_gradient_zero_when_input_ignored():
    m = random_model(5)
    params = [dict(p) for p in m.params]
    params[0] = {"W": np.zeros_like(params[0]["W"]), "b": params[0]["b"]}
    z = M.make_classifier(m.layers, params, m.input_shape)
    g = M.input_gradient(z, np.ones(m.input_shape), 1)
    assert np.array_equal(g, np.zeros(m.input_shape))


def test_gradient_scales_with_loss():
    m = random_model(6)
    x = np.random.default_rng(1).normal(size=m.input_shape)
    p = M.predict_proba(m, x)
    g = p.copy()
    g[2] -= 1.0
    np.testing.assert_allclose(M.logit_gradient(m, x, 2 * g), 2 * M.input_gradient(m, x, 2), rtol=1e-12)


def test_invalid_label_raises():
    m = random_model(0)
    with pytest.raises(LabelError):
        M.input_gradient(m, np.zeros(m.input_shape), 3)


def test_penultimate_single_dense_is_flattened_input():
    m = linear_model([1.0, -2.0, 0.5])
    x = np.array([[0.3, 0.1, -0.7]])
    np.testing.assert_array_equal(M.penultimate(m, x), x.reshape(-1))


@pytest.mark.parametrize("seed", range(3))
def test_penultimate_reconstructs_logits_and_matches_truncated_oracle(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed).normal(size=m.input_shape)
    f = M.penultimate(m, x)
    head = m.params[-1]
    np.testing.assert_allclose(f @ head["W"] + head["b"], M.forward(m, x), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f, naive_forward(m, x, stop=m.head_index), rtol=1e-10, atol=1e-12)


def test_feature_gradient_matches_finite_differences():
    m = random_model(8, input_shape=(2, 7))
    x = np.random.default_rng(2).normal(size=m.input_shape)
    v = np.random.default_rng(3).normal(size=M.penultimate(m, x).shape)
    g = M.feature_gradient(m, x, v)
    fd = fd_input_gradient(lambda u: float(M.penultimate(m, u) @ v), x)
    np.testing.assert_allclose(g, fd, atol=1e-6, rtol=1e-4)


def test_stochastic_scores_without_dropout_are_identical():
    m = random_model(1, dropout=0.0)
    s = M.stochastic_scores(m, np.ones(m.input_shape), 5, 0)
    assert s.shape == (5, 3)
    assert np.all(s == s[0])


def test_stochastic_scores_seeded():
    m = random_model(2)
    x = np.ones(m.input_shape)
    assert np.array_equal(M.stochastic_scores(m, x, 8, 3), M.stochastic_scores(m, x, 8, 3))
    with pytest.raises(ParameterError):
        M.stochastic_scores(m, x, 0, 3)


def test_stochastic_scores_match_per_pass_forward():
    m = random_model(3)
    xs = np.random.default_rng(0).normal(size=(2,) + m.input_shape)
    # the prefix before the first dropout layer has no randomness, so the
    # shortcut must equal full stochastic passes on one rng stream
    rng = np.random.default_rng(11)
    full = np.stack([M.softmax(M.forward(m, xs, "stochastic", rng)) for _ in range(4)])
    np.testing.assert_allclose(M.stochastic_scores(m, xs, 4, 11), full, rtol=1e-13)


def test_dropout_unit_expectation():
    # one input unit, dropout(0.5), dense head z1 = x: E[z1] = x, sd = x
    W = np.array([[0.0, 1.0]])
    m = M.make_classifier([M.flatten(), M.dropout(0.5), M.dense(2)],
                          [{}, {}, {"W": W, "b": np.zeros(2)}], (1, 1))
    rng = np.random.default_rng(0)
    draws = np.array([M.forward(m, np.array([[2.0]]), "stochastic", rng)[1] for _ in range(10_000)])
    se = 2.0 / np.sqrt(len(draws))
    assert abs(draws.mean() - 2.0) < 3 * se


def test_linear_model_stochastic_mean_equals_deterministic():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 2))
    m = M.make_classifier([M.flatten(), M.dropout(0.3), M.dense(2)],
                          [{}, {}, {"W": W, "b": np.zeros(2)}], (1, 4))
    x = rng.normal(size=(1, 4))
    draws = np.array([M.forward(m, x, "stochastic", rng) for _ in range(20_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - M.forward(m, x)) < 3 * se + 1e-12)


def test_train_separable_and_deterministic():
    rng = np.random.default_rng(0)
    y = np.arange(60) % 2
    x = rng.normal(size=(60, 2, 8)) + np.where(y == 1, 2.0, -2.0)[:, None, None]
    layers = [M.flatten(), M.dense(8), M.activation("relu"), M.dense(2)]
    cfg = M.TrainConfig(epochs=20, seed=3)
    a = M.train(layers, x, y, cfg)
    b = M.train(layers, x, y, cfg)
    assert np.mean(a.predict(x) == y) >= 0.99
    assert a.same_parameters(b)


def test_train_single_example_memorized():
    x = np.random.default_rng(0).normal(size=(1, 2, 8))
    m = M.train([M.flatten(), M.dense(2)], x, [1], M.TrainConfig(epochs=50))
    assert m.predict(x)[0] == 1


def test_train_empty_raises():
    with pytest.raises(DataError):
        M.train([M.flatten(), M.dense(2)], np.zeros((0, 2, 8)), np.zeros(0, int))


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        M.dropout(1.0)
    with pytest.raises(ConfigError):
        M.layer_shapes([M.conv1d(2, 10)], (1, 5))
    with pytest.raises(ConfigError):
        M.TrainConfig(learning_rate=0)


def test_checkpoint_round_trip(tmp_path):
    m = random_model(9)
    path = tmp_path / "m.model"
    M.save_model(m, path)
    back = M.load_model(path)
    assert back.same_parameters(m)
    assert back.layers == m.layers and back.input_shape == m.input_shape
    x = np.random.default_rng(0).normal(size=m.input_shape)
    assert np.array_equal(M.forward(back, x), M.forward(m, x))
    raw = path.read_bytes()
    path.write_bytes(b"junk" + raw)
    with pytest.raises(HeaderError):
        M.load_model(path)
