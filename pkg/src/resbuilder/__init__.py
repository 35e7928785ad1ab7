"""Grow, prune and re-width ResNet classifiers under a FLOP budget."""
from .arch import Architecture, ParamStore, flops, init_params, new_minimal, resnet18
from .config import RunConfig, load_config, parse_config
from .data import Dataset, load_named, synthetic_blobs
from .pipeline import (RunHistory, TrainConfig, TrainingVariant, regularization_sweep, run_resbuilder,
                       select_best, train_phase)

__all__ = [
    "Architecture", "ParamStore", "flops", "init_params", "new_minimal", "resnet18",
    "RunConfig", "load_config", "parse_config", "Dataset", "load_named", "synthetic_blobs",
    "RunHistory", "TrainConfig", "TrainingVariant", "regularization_sweep", "run_resbuilder",
    "select_best", "train_phase",
]
