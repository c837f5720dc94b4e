"""Latent banks, the forward/backward deformation networks and the supervised variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .graphnet import EdgeConvStack, pos_encode
from .tensor import Tensor


class LatentBank:
    """Learnable shape codes (one per identity) and pose codes (one per training frame)."""

    def __init__(self, n_shapes: int, n_poses: int, shape_dim: int, pose_dim: int, rng: np.random.Generator, std: float = 0.01, dtype=np.float32):
        self.shape_codes = Tensor(rng.normal(0.0, std, (n_shapes, shape_dim)), requires_grad=True, dtype=dtype)
        self.pose_codes = Tensor(rng.normal(0.0, std, (n_poses, pose_dim)), requires_grad=True, dtype=dtype)

    @property
    def n_shapes(self) -> int:
        return self.shape_codes.shape[0]

    @property
    def n_poses(self) -> int:
        return self.pose_codes.shape[0]

    def shapes(self, rows) -> Tensor:
        return T.gather_rows(self.shape_codes, np.asarray(rows, dtype=np.int64).reshape(-1))

    def poses(self, rows) -> Tensor:
        return T.gather_rows(self.pose_codes, np.asarray(rows, dtype=np.int64).reshape(-1))

    def mean_shape(self) -> np.ndarray:
        return self.shape_codes.values.mean(axis=0)

    def mean_pose(self) -> np.ndarray:
        return self.pose_codes.values.mean(axis=0)

    def parameters(self) -> dict[str, Tensor]:
        return {"bank.shape": self.shape_codes, "bank.pose": self.pose_codes}


@dataclass
class CycleOutput:
    delta_x: Tensor  # forward offsets, posed -> canonical
    y_tilde: Tensor  # canonical prediction
    delta_y: Tensor  # backward offsets, canonical -> posed
    x_tilde: Tensor  # cycle reconstruction of the input


def _points(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_points(x: Tensor, k: int) -> None:
    if x.shape[-1] != 3 or x.ndim not in (2, 3):
        raise T.ShapeError("points", x.shape, ("N", 3))
    if x.shape[-2] <= k:
        raise ValueError(f"need more than k={k} points, got {x.shape[-2]}")


class GnpmModel:
    """Forward network (posed -> canonical) and backward network (canonical -> posed)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.fwd = EdgeConvStack(cfg, rng, dtype)
        self.bwd = EdgeConvStack(cfg, rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"fwd.{k}": v for k, v in self.fwd.parameters().items()}
        params.update({f"bwd.{k}": v for k, v in self.bwd.parameters().items()})
        return params

    def forward_deform(self, x, shape_code, pose_code) -> tuple[Tensor, Tensor]:
        x = _points(x, self.dtype)
        _check_points(x, self.cfg.k)
        delta = self.fwd(pos_encode(x, self.cfg.pe), shape_code, pose_code)
        return delta, x + delta

    def backward_deform(self, y, shape_code, pose_code) -> tuple[Tensor, Tensor]:
        y = _points(y, self.dtype)
        _check_points(y, self.cfg.k)
        delta = self.bwd(pos_encode(y, self.cfg.pe), shape_code, pose_code)
        return delta, y + delta

    def cycle(self, x, shape_code, pose_code) -> CycleOutput:
        delta_x, y_tilde = self.forward_deform(x, shape_code, pose_code)
        delta_y, x_tilde = self.backward_deform(y_tilde, shape_code, pose_code)
        return CycleOutput(delta_x, y_tilde, delta_y, x_tilde)

    def first_layer_features(self, x, shape_code, pose_code) -> np.ndarray:
        """First EdgeConv layer output of the forward network, ``[N, D_1]``."""
        x = _points(x, self.dtype)
        enc = pos_encode(x, self.cfg.pe)
        inp = self.fwd.conditioned_input(enc, shape_code, pose_code)
        out = self.fwd.layers[0](inp).values
        return out[0] if x.ndim == 2 else out


class SupervisedGnpm:
    """Single network mapping canonical points and codes to posed points."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.net = EdgeConvStack(cfg, rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {f"net.{k}": v for k, v in self.net.parameters().items()}

    def deform(self, x_canonical, shape_code, pose_code) -> tuple[Tensor, Tensor]:
        x = _points(x_canonical, self.dtype)
        _check_points(x, self.cfg.k)
        delta = self.net(pos_encode(x, self.cfg.pe), shape_code, pose_code)
        return delta, x + delta

    # shared decode interface with GnpmModel.backward_deform
    backward_deform = deform

    def first_layer_features(self, x, shape_code, pose_code) -> np.ndarray:
        x = _points(x, self.dtype)
        inp = self.net.conditioned_input(pos_encode(x, self.cfg.pe), shape_code, pose_code)
        out = self.net.layers[0](inp).values
        return out[0] if x.ndim == 2 else out


def supervised_deform(model: SupervisedGnpm, x_canonical, shape_code, pose_code) -> Tensor:
    return model.deform(x_canonical, shape_code, pose_code)[1]
