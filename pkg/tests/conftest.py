import numpy as np
import pytest

from eegadv import model as M


def small_layers(num_classes=2, dropout=0.25):
    return [
        M.conv1d(3, 4, 2), M.activation("elu"), M.flatten(), M.dropout(dropout),
        M.dense(6), M.activation("relu"), M.dense(num_classes),
    ]


def random_model(seed, input_shape=(2, 9), num_classes=3, dropout=0.25):
    """Small random conv/dense model with non-zero biases."""
    rng = np.random.default_rng(seed)
    m = M.init_classifier(small_layers(num_classes, dropout), input_shape, seed=seed)
    params = [{k: v + (0.1 * rng.normal(size=v.shape) if k == "b" else 0) for k, v in p.items()}
              for p in m.params]
    return M.make_classifier(m.layers, params, input_shape, seed=seed)


@pytest.fixture
def tiny_model():
    return random_model(0)


def linear_model(w, b=(0.0, 0.0)):
    """Two-class logit model z = [0, w.x] + b on a (1, len(w)) input."""
    w = np.asarray(w, dtype=np.float64)
    W = np.zeros((w.size, 2))
    W[:, 1] = w
    return M.make_classifier([M.flatten(), M.dense(2)], [{}, {"W": W, "b": np.asarray(b, float)}], (1, w.size))


def tiny_config(**changes):
    """A few-second end-to-end experiment on 5 small synthetic subjects."""
    from eegadv.attacks import AttackConfig
    from eegadv.data import SynthConfig
    from eegadv.harness import DetectorConfig, ExperimentConfig

    cfg = ExperimentConfig(
        seed=3,
        synth=SynthConfig(num_subjects=5, epochs_per_subject=40, channels=4, samples=32,
                          class_separation=0.3, seed=5),
        train=M.TrainConfig(epochs=15),
        attack=AttackConfig(epsilon=0.4, alpha=0.1, n_iter=5, cw_steps=20, cw_binary_steps=4, kappa=5.0),
        detectors=DetectorConfig(n_passes=5, lid_batch_size=30, lid_k_grid=(5, 10),
                                 md_eps_grid=(1e-4, 1e-3)),
        folds=(0,),
        min_effective=3,
    )
    return cfg.replace(**changes)


ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_LOG = []


def acceptance_config(seed):
    """Default experiment on folds 0 and 1; data and pipeline share the seed."""
    import dataclasses

    from eegadv.harness import ExperimentConfig

    cfg = ExperimentConfig(seed=seed, folds=(0, 1), substitutes=("conv", "dense"))
    return cfg.replace(synth=dataclasses.replace(cfg.synth, seed=seed))


@pytest.fixture(scope="session")
def seed_reports():
    from eegadv.harness import run_experiment

    return {s: run_experiment(acceptance_config(s)) for s in ACCEPTANCE_SEEDS}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LOG):
            terminalreporter.write_line(line)
