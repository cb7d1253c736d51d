"""Experiment orchestration: configs, the LOSO pipeline, tuning and reports."""

from .config import DetectorConfig, ExperimentConfig, load_config
from .experiment import run_blackbox, run_experiment, run_generalization, run_whitebox
from .report import ExperimentReport, FoldReport, emit_report
from .tuning import tune_hyperparams
