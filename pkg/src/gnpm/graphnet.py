"""Positional encoding, dynamic-graph EdgeConv layers and the EdgeConv stack."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig, PosEncodeConfig
from .knn import knn_blocked
from .tensor import Tensor


def pos_encode(points: Tensor, cfg: PosEncodeConfig | None = None) -> Tensor:
    """Fourier features ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)]``.

    Raw coordinates come first, then one ``[sin | cos]`` block per band, each
    block holding all input coordinates. Works on any leading shape.
    """
    cfg = cfg or PosEncodeConfig()
    points = T.as_tensor(points)
    parts = [points] if cfg.include_input else []
    for band in range(cfg.bands):
        scaled = points * (np.pi * 2.0**band)
        parts.append(T.sin(scaled))
        parts.append(T.cos(scaled))
    return T.concat(parts, axis=-1)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, scale: float = 1.0):
        self.weight = Tensor(glorot(rng, d_in, d_out, dtype) * scale, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise T.ShapeError("expected [N, D] or [B, N, D] features", x.shape, ("B", "N", "D"))
    return x, False


class EdgeConvLayer:
    """EdgeConv with max aggregation over a k-NN graph rebuilt from the input features.

    The edge function is a two-layer MLP on ``[x_i || x_j - x_i]``. Its first
    linear map is split as ``x_i (W_a - W_b) + x_j W_b`` so per-edge work only
    starts after that projection; the result equals the explicit
    concatenation (see :func:`edge_features`).
    """

    def __init__(self, d_in: int, d_out: int, k: int, rng: np.random.Generator, dtype=np.float32, slope: float = 0.2, block: int = 256):
        self.d_in, self.d_out, self.k = d_in, d_out, k
        self.slope = slope
        self.block = block
        self.lin1 = Linear(2 * d_in, d_out, rng, dtype)
        self.lin2 = Linear(d_out, d_out, rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w1": self.lin1.weight,
            "b1": self.lin1.bias,
            "w2": self.lin2.weight,
            "b2": self.lin2.bias,
        }

    def graph(self, values: np.ndarray) -> np.ndarray:
        """Neighbour indices ``[B, N, k]`` computed on the current features (not differentiated)."""
        n = values.shape[1]
        if self.k >= n:
            raise ValueError(f"EdgeConv: k={self.k} must be < N={n}")
        block = min(self.block, n)
        return np.stack([knn_blocked(v, self.k, block).idx for v in values])

    def __call__(self, x: Tensor, idx: np.ndarray | None = None) -> Tensor:
        x, squeeze = _batched(x)
        b, n, d = x.shape
        if d != self.d_in:
            raise T.ShapeError("EdgeConv input width", x.shape, (b, n, self.d_in))
        if idx is None:
            idx = self.graph(x.values)
        flat = (idx + (np.arange(b) * n)[:, None, None]).reshape(-1)
        w1 = self.lin1.weight
        w_center, w_edge = w1[: self.d_in], w1[self.d_in :]
        center = x @ (w_center - w_edge)  # [B, N, H]
        nbr = x @ w_edge  # [B, N, H]
        h = self.d_out
        gathered = T.gather_rows(nbr.reshape(b * n, h), flat).reshape(b, n, self.k, h)
        e = T.leaky_relu(center.reshape(b, n, 1, h) + gathered + self.lin1.bias, self.slope)
        e = self.lin2(e)
        out, _ = T.reduce_max(e, axis=2)
        return out.reshape(n, h) if squeeze else out


def edge_features(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Explicit per-edge inputs ``[x_i || x_j - x_i]`` of shape ``[N, k, 2D]``."""
    xi = np.broadcast_to(x[:, None, :], idx.shape + (x.shape[1],))
    return np.concatenate([xi, x[idx] - xi], axis=-1)


class EdgeConvStack:
    """Three EdgeConv layers, concatenated features, MLP head to per-point 3-D offsets.

    Shape and pose codes are concatenated to every point's encoded input before
    the first layer.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.in_dim = cfg.pe.out_dim(3) + cfg.shape_dim + cfg.pose_dim
        dims = [self.in_dim, *cfg.edge_dims]
        self.layers = [
            EdgeConvLayer(dims[i], dims[i + 1], cfg.k, rng, dtype, cfg.slope, cfg.knn_block)
            for i in range(len(cfg.edge_dims))
        ]
        self.head1 = Linear(sum(cfg.edge_dims), cfg.head_hidden, rng, dtype)
        self.head2 = Linear(cfg.head_hidden, 3, rng, dtype, scale=cfg.head_init_scale)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"edge{i}.{name}"] = p
        for prefix, lin in (("head1", self.head1), ("head2", self.head2)):
            for name, p in lin.parameters().items():
                params[f"{prefix}.{name}"] = p
        return params

    def conditioned_input(self, encoded: Tensor, shape_code: Tensor, pose_code: Tensor) -> Tensor:
        encoded, _ = _batched(encoded)
        b, n, _ = encoded.shape
        s = _codes(shape_code, b, self.cfg.shape_dim, "shape", encoded.dtype)
        p = _codes(pose_code, b, self.cfg.pose_dim, "pose", encoded.dtype)
        s = T.broadcast_to(s.reshape(b, 1, -1), (b, n, self.cfg.shape_dim))
        p = T.broadcast_to(p.reshape(b, 1, -1), (b, n, self.cfg.pose_dim))
        x = T.concat([encoded, s, p], axis=-1)
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError("stack input width", x.shape, (b, n, self.in_dim))
        return x

    def features(self, encoded: Tensor, shape_code: Tensor, pose_code: Tensor) -> list[Tensor]:
        """Per-layer EdgeConv outputs."""
        x = self.conditioned_input(encoded, shape_code, pose_code)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats

    def __call__(self, encoded: Tensor, shape_code: Tensor, pose_code: Tensor) -> Tensor:
        squeeze = encoded.ndim == 2
        feats = self.features(encoded, shape_code, pose_code)
        h = T.leaky_relu(self.head1(T.concat(feats, axis=-1)), self.cfg.slope)
        out = self.head2(h)
        return out.reshape(out.shape[1:]) if squeeze else out


def _codes(code, b: int, dim: int, what: str, dtype) -> Tensor:
    if not isinstance(code, Tensor):
        code = Tensor(code, dtype=dtype)
    if code.ndim == 1:
        code = code.reshape(1, -1)
        if b != 1:
            code = T.broadcast_to(code, (b, code.shape[1]))
    if code.shape != (b, dim):
        raise T.ShapeError(f"{what} code", code.shape, (b, dim))
    return code
