"""Continual fine-tuning of a small encoder with two frozen teachers.

The student distills from the pre-trained encoder and the previous stage's
encoder over an unlabeled reference pool, weighting each sample by how far
apart the two teachers place it.
"""
from . import kernels
from .config import ExperimentConfig, load_config, parse_config, standard_config
from .errors import DualTeacherError
from .metrics import AccuracyMatrix, aggregate, avg_accuracy, forgetting, zs_degradation
from .protocol import make_sequences, run_sequence, train_stage

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "DualTeacherError",
    "ExperimentConfig",
    "aggregate",
    "avg_accuracy",
    "forgetting",
    "kernels",
    "load_config",
    "make_sequences",
    "parse_config",
    "run_sequence",
    "standard_config",
    "train_stage",
    "zs_degradation",
]
