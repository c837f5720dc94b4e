"""Tiny datasets and configs shared by the fast tests."""

from gnpm.config import LossWeights, ModelConfig, PosEncodeConfig, TrainConfig
from gnpm.data import DataSpec, generate


def tiny_dataset(seed=0):
    return generate(DataSpec(identities=2, sequences=1, heldout_sequences=1, frames=3, points=40, seed=seed))


def tiny_config(**overrides):
    model = ModelConfig(edge_dims=(6, 6, 8), head_hidden=8, shape_dim=4, pose_dim=4, k=4, pe=PosEncodeConfig(bands=2))
    cfg = dict(epochs=2, batch_size=2, points=24, model=model, weights=LossWeights())
    cfg.update(overrides)
    return TrainConfig(**cfg)
