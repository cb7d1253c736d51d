"""Experiment configuration, loadable from one JSON file."""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .. import model as M
from ..attacks import AttackConfig
from ..data import SynthConfig
from ..errors import ConfigError


def conv_arch(input_shape, num_classes):
    """Temporal conv block, one hidden dense layer, dropout before both dense layers."""
    return [
        M.conv1d(16, 16, 8), M.activation("elu"), M.flatten(), M.dropout(0.25),
        M.dense(48), M.activation("elu"), M.dropout(0.25), M.dense(num_classes),
    ]


def shallow_arch(input_shape, num_classes):
    """Single conv block with a long kernel and a coarse stride."""
    return [
        M.conv1d(6, 32, 8), M.activation("relu"), M.flatten(), M.dropout(0.25),
        M.dense(24), M.activation("relu"), M.dropout(0.25), M.dense(num_classes),
    ]


def dense_arch(input_shape, num_classes):
    return [
        M.flatten(), M.dropout(0.1), M.dense(48), M.activation("elu"),
        M.dropout(0.25), M.dense(num_classes),
    ]


ARCHITECTURES = {"conv": conv_arch, "shallow": shallow_arch, "dense": dense_arch}


def build_layers(name, input_shape, num_classes):
    try:
        return ARCHITECTURES[name](input_shape, num_classes)
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


def default_eps_grid():
    return tuple(float(v) for v in np.logspace(-5, -2, 7))


@dataclass(frozen=True)
class DetectorConfig:
    n_passes: int = 50
    lid_batch_size: int = 100
    lid_k_grid: tuple = tuple(range(50, 91, 5))
    md_eps_grid: tuple = field(default_factory=default_eps_grid)
    md_calibrate: bool = True
    feature_layer: str = "penultimate"
    inner_folds: int = 3
    ridge: float = 1e-6

    def __post_init__(self):
        if self.n_passes < 2:
            raise ConfigError("n_passes must be at least 2")
        if not self.lid_k_grid or not self.md_eps_grid:
            raise ConfigError("tuning grids must be nonempty")
        if max(self.lid_k_grid) >= self.lid_batch_size:
            raise ConfigError("every LID k must be smaller than lid_batch_size")
        if min(self.lid_k_grid) < 2:
            raise ConfigError("LID k must be at least 2")
        if self.feature_layer not in ("penultimate", "logits"):
            raise ConfigError("feature_layer must be 'penultimate' or 'logits'")
        if self.inner_folds < 2:
            raise ConfigError("inner_folds must be at least 2")
        object.__setattr__(self, "lid_k_grid", tuple(sorted(int(k) for k in self.lid_k_grid)))
        object.__setattr__(self, "md_eps_grid", tuple(sorted(float(e) for e in self.md_eps_grid)))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    dataset_path: str | None = None
    standardize: str = "zscore"
    target: str = "conv"
    untrained_target: bool = False
    substitutes: tuple = ("conv",)
    train: M.TrainConfig = field(default_factory=M.TrainConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(kappa=5.0))
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    folds: tuple | None = None
    detector_holdout: float = 0.3
    max_train_attack: int = 120
    min_effective: int = 10
    out_dir: str = "results"

    def __post_init__(self):
        if self.synth is None and self.dataset_path is None:
            raise ConfigError("need either a synthetic config or a dataset path")
        if not self.substitutes:
            raise ConfigError("need at least one substitute architecture")
        for name in (self.target, *self.substitutes):
            if name not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {name!r}")
        if not 0.0 < self.detector_holdout < 1.0:
            raise ConfigError("detector_holdout must lie in (0, 1)")
        if self.max_train_attack < 1 or self.min_effective < 1:
            raise ConfigError("max_train_attack and min_effective must be positive")
        object.__setattr__(self, "substitutes", tuple(self.substitutes))
        if self.folds is not None:
            object.__setattr__(self, "folds", tuple(int(f) for f in self.folds))

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "synth": SynthConfig, "train": M.TrainConfig,
            "attack": AttackConfig, "detectors": DetectorConfig,
        }
        try:
            for key, typ in nested.items():
                if key in d and isinstance(d[key], dict):
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def load_config(path):
    try:
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
