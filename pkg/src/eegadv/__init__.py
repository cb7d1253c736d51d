"""Adversarial attacks on EEG classifiers and detectors for them."""

from .attacks import AttackConfig, blackbox_fgsm, cw, fgsm, filter_effective, pgd, train_substitute
from .data import Dataset, SynthConfig, load_dataset, loso_split, save_dataset, synth_generate
from .detectors import bu_score, fit_detector, lid_score, md_max_score
from .errors import ConfigError, DataError, EegAdvError, NumericError
from .metrics import auc, bca, rca
from .model import Classifier, TrainConfig, forward, input_gradient, train

__version__ = "0.1.0"
