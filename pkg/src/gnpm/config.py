"""Hyperparameter dataclasses and the INI-style config file.

Defaults are the published settings; desk-scale experiments override widths,
point counts and epochs explicitly.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PosEncodeConfig:
    bands: int = 8
    include_input: bool = True

    def out_dim(self, d_in: int = 3) -> int:
        return d_in * (int(self.include_input) + 2 * self.bands)


@dataclass
class ModelConfig:
    edge_dims: tuple[int, ...] = (128, 128, 256)
    head_hidden: int = 256
    shape_dim: int = 128
    pose_dim: int = 128
    k: int = 10
    slope: float = 0.2
    head_init_scale: float = 0.01
    knn_block: int = 256
    pe: PosEncodeConfig = field(default_factory=PosEncodeConfig)


@dataclass
class LossWeights:
    icp_init: float = 1e-1
    icp_min: float = 1e-2
    temp: float = 5e-2
    sigma_s: float = 1e-4
    sigma_p: float = 1e-4
    loop: float = 1.0
    # "canonical": forward prediction vs GT canonical cloud; "input": cycle output vs input points
    icp_target: str = "canonical"
    # "match": squared distance to the symmetric match; "score": forward + reverse distance;
    # "chamfer": match term plus every target point pulled to its nearest prediction
    icp_mode: str = "match"

    def lambda_icp(self, epoch: float, total_epochs: int) -> float:
        from .losses import cosine_anneal

        return cosine_anneal(self.icp_init, self.icp_min, epoch, total_epochs)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 1
    points: int = 1024
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 30
    seed: int = 0
    precision: str = "float32"
    code_init_std: float = 0.01
    supervised: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self) -> None:
        for name in ("batch_size", "points", "lr", "lr_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.epochs < 0:
            raise ValueError("train.epochs must be non-negative")
        if self.points <= self.model.k:
            raise ValueError(f"train.points={self.points} must exceed k={self.model.k}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class FitConfig:
    iterations: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 30
    sigma_s: float = 1e-4
    sigma_p: float = 1e-4
    points: int = 1024
    warm_start: bool = True
    lambda_icp: float = 1e-2  # supervised variant only
    seed: int = 0


# -- serialisation -------------------------------------------------------------


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value)
        elif key == "edge_dims":
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "weights"): LossWeights,
    (ModelConfig, "pe"): PosEncodeConfig,
}


def train_config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data)


def to_json(cfg) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True)


# INI layout: [train], [model], [pe], [loss], [fit]
_SECTIONS = {"train": TrainConfig, "model": ModelConfig, "pe": PosEncodeConfig, "loss": LossWeights, "fit": FitConfig}


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise KeyError(f"unknown config key [{cls.__name__}] {key}")
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def load_config(path) -> tuple[TrainConfig, FitConfig]:
    """Read an INI file; missing sections/keys keep their defaults."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise KeyError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        for key, raw in parser.items(section):
            values[section][key] = _coerce(cls, key, raw)
    model = ModelConfig(pe=PosEncodeConfig(**values["pe"]), **values["model"])
    train = TrainConfig(model=model, weights=LossWeights(**values["loss"]), **values["train"])
    train.validate()
    return train, FitConfig(**values["fit"])


def write_config(path, train: TrainConfig, fit: FitConfig | None = None) -> None:
    fit = fit or FitConfig()
    parser = configparser.ConfigParser()
    sections = {
        "train": {k: v for k, v in to_dict(train).items() if k not in ("model", "weights")},
        "model": {k: v for k, v in to_dict(train.model).items() if k != "pe"},
        "pe": to_dict(train.model.pe),
        "loss": to_dict(train.weights),
        "fit": to_dict(fit),
    }
    for name, items in sections.items():
        parser[name] = {k: " ".join(map(str, v)) if isinstance(v, (tuple, list)) else str(v) for k, v in items.items()}
    with open(Path(path), "w", encoding="utf-8") as fh:
        parser.write(fh)
