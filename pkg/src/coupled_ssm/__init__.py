"""Coupled state-space fusion of multiple modalities, in NumPy."""

from .config import CoupledModelConfig, OptimConfig, RunConfig, SyntheticTaskSpec
from .model import ModalityBatch, init_model, model_backward, model_forward, predict

__version__ = "0.1.0"

__all__ = [
    "CoupledModelConfig",
    "OptimConfig",
    "RunConfig",
    "SyntheticTaskSpec",
    "ModalityBatch",
    "init_model",
    "model_forward",
    "model_backward",
    "predict",
]
