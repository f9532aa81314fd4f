"""Experiment plumbing: datasets, pretraining, config, orchestration, reports."""

from .config import ExperimentConfig, load_config
from .datasets import DatasetSplits, load_idx, make_dataset
from .experiments import ExperimentReport, run_experiment, run_noise_sweep
from .pretrain import build_desk_model, pretrain
from .reports import load_rows_csv, validate_rows, write_report

__all__ = [
    "DatasetSplits",
    "ExperimentConfig",
    "ExperimentReport",
    "build_desk_model",
    "load_config",
    "load_idx",
    "load_rows_csv",
    "make_dataset",
    "pretrain",
    "run_experiment",
    "run_noise_sweep",
    "validate_rows",
    "write_report",
]
