"""Desk-scale settings used by the acceptance suite and the scripts.

The published widths (128/128/256, 128-D codes, 1024 points) are too slow for
a single CPU core, so these presets shrink the network and codes and use the
opt-in ``chamfer`` ICP mode with a larger weight. Everything else keeps the
library defaults.
"""

from __future__ import annotations

from .config import FitConfig, LossWeights, ModelConfig, TrainConfig
from .data import DataSpec


def data_spec(seed: int = 0) -> DataSpec:
    """3 identities, 2 training + 1 held-out sequence of 20 frames each, 256 points, 0.6 rad."""
    return DataSpec(identities=3, sequences=2, heldout_sequences=1, frames=20, points=256, amplitude=0.6, seed=seed)


def model_config() -> ModelConfig:
    return ModelConfig(edge_dims=(32, 32, 64), head_hidden=64, shape_dim=16, pose_dim=16)


def cycle_config(icp: bool = True, epochs: int = 300, seed: int = 0) -> TrainConfig:
    if icp:
        weights = LossWeights(icp_init=10.0, icp_min=1.0, icp_mode="chamfer")
    else:
        weights = LossWeights(icp_init=0.0, icp_min=0.0, icp_mode="chamfer")
    return TrainConfig(epochs=epochs, batch_size=1, points=256, seed=seed, model=model_config(), weights=weights)


def supervised_config(epochs: int = 50, seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=1, points=256, seed=seed, supervised=True, model=model_config())


def fit_config() -> FitConfig:
    return FitConfig(iterations=200, points=256)
