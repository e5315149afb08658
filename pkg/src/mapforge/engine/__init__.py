"""Training orchestration, trajectory evaluation, map rendering, and CLI."""

from .evaluate import AteReport, align_trajectories, ate
from .train import EngineError, TrainConfig, TrainResult, run_training, train_epoch

__all__ = [
    "AteReport",
    "align_trajectories",
    "ate",
    "EngineError",
    "TrainConfig",
    "TrainResult",
    "run_training",
    "train_epoch",
]
