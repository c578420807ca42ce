"""Experiment harness: synthetic task, toy model, training, checks and CLI."""
from .checkpoint import Checkpoint, CheckpointError, load, save
from .config import ExperimentConfig, OptimizerConfig, SyntheticTaskSpec, load_config, save_config
from .data import make_dataset, make_splits
from .gradcheck import GradcheckConfig, gradcheck
from .model import encode, head_and_loss
from .train import TrainingAborted, evaluate, train
from .trend import run_trend

__all__ = [
    "Checkpoint", "CheckpointError", "ExperimentConfig", "GradcheckConfig", "OptimizerConfig",
    "SyntheticTaskSpec", "TrainingAborted", "encode", "evaluate", "gradcheck", "head_and_loss",
    "load", "load_config", "make_dataset", "make_splits", "run_trend", "save", "save_config", "train",
]
