"""Generalizable neural point-cloud deformation models with a small numpy autodiff core."""

from .config import FitConfig, LossWeights, ModelConfig, PosEncodeConfig, TrainConfig
from .data import DataSpec, Dataset, generate
from .model import GnpmModel, LatentBank, SupervisedGnpm
from .optim import Trainer, fit, train
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "DataSpec",
    "Dataset",
    "FitConfig",
    "GnpmModel",
    "LatentBank",
    "LossWeights",
    "ModelConfig",
    "PosEncodeConfig",
    "SupervisedGnpm",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "fit",
    "generate",
    "train",
]
