"""Federated training runtime: source workers, server loop and transports."""

from .messages import GradientReport, ParamBroadcast
from .server import (
    Adam,
    SGD,
    TrainConfig,
    TrainTrace,
    aggregate_gradients,
    noise_seed_for,
    step,
    train,
)
from .worker import SourceWorker

__all__ = [
    "Adam",
    "GradientReport",
    "ParamBroadcast",
    "SGD",
    "SourceWorker",
    "TrainConfig",
    "TrainTrace",
    "aggregate_gradients",
    "noise_seed_for",
    "step",
    "train",
]
