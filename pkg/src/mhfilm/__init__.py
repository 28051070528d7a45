"""Desk-scale multi-hop FiLM: numpy autodiff, synthetic guessing games, Oracle/Guesser/Pointer models."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .film import ModelConfig, MultiHopFiLM
from .games import GameConfig, Vocabulary, generate_dataset, read_dataset, write_dataset
from .training import TrainSettings, evaluate, gradcheck_model, train

__version__ = "0.1.0"

__all__ = [
    "GameConfig",
    "ModelConfig",
    "MultiHopFiLM",
    "Tensor",
    "TrainSettings",
    "Vocabulary",
    "backward",
    "evaluate",
    "finite_diff_check",
    "generate_dataset",
    "gradcheck_model",
    "no_grad",
    "read_dataset",
    "train",
    "write_dataset",
]
