"""Adam, learning-rate schedule, the joint training loop and test-time latent fitting."""

from __future__ import annotations

import contextlib
import sys
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .config import FitConfig, TrainConfig
from .data import Dataset, sample_points
from .model import GnpmModel, LatentBank, SupervisedGnpm
from .tensor import Tensor


# -- Adam -----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float | None = None, sparse_rows=()) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    A parameter whose gradient is identically zero is left untouched (moments
    included). For names in ``sparse_rows`` the same rule applies row by row,
    which keeps unused latent codes frozen.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = value
            continue
        if g.shape != value.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != parameter shape {value.shape} for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam: non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        if name in sparse_rows and value.ndim == 2:
            rows = np.flatnonzero(np.any(g != 0, axis=1))
            if rows.size == 0:
                out[name] = value
                continue
            gr = g[rows]
            m[rows] = b1 * m[rows] + (1 - b1) * gr
            v[rows] = b2 * v[rows] + (1 - b2) * gr * gr
            new = value.copy()
            new[rows] -= (lr * (m[rows] / corr1) / (np.sqrt(v[rows] / corr2) + state.eps)).astype(value.dtype)
            out[name] = new
            continue
        if not g.any():
            out[name] = value
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        out[name] = value - (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(value.dtype)
    return out


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, sparse_rows=()):
        self.params = params
        self.state = AdamState(lr=lr)
        self.sparse_rows = set(sparse_rows)

    def step(self, lr: float | None = None) -> None:
        values = {k: p.values for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new = adam_step(values, grads, self.state, lr, self.sparse_rows)
        for k, p in self.params.items():
            p.values = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def lr_schedule(epoch: int, lr: float = 1e-3, decay: float = 0.5, step: int = 30) -> float:
    return lr * decay ** (epoch // step)


@contextlib.contextmanager
def frozen(params: dict[str, Tensor]):
    """Temporarily detach parameters from the graph (no grads computed or stored)."""
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.values)


# -- training ---------------------------------------------------------------------------


class Trainer:
    """Joint optimisation of network weights and latent codes.

    Per epoch the training frames are shuffled and ``points`` samples are drawn
    per cloud, both from a generator seeded with ``(seed, epoch)``, so a run
    resumed from a checkpoint replays exactly the same batches.
    """

    def __init__(self, dataset: Dataset, config: TrainConfig, verbose: bool = False):
        config.validate()
        dataset.validate()
        self.dataset = dataset
        self.config = config
        self.verbose = verbose
        self.frame_ids = dataset.train_frames()
        if not self.frame_ids:
            raise ValueError("dataset has no training frames")
        self.shape_ids = sorted({dataset.frames[f].identity for f in self.frame_ids})
        for ident in self.shape_ids:
            canon = dataset.identities[ident].canonical
            if canon is None or len(canon) == 0:
                raise ValueError(f"identity {ident} has no canonical cloud")
        self.pose_row = {f: i for i, f in enumerate(self.frame_ids)}
        self.shape_row = {c: i for i, c in enumerate(self.shape_ids)}
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        model_cls = SupervisedGnpm if config.supervised else GnpmModel
        self.model = model_cls(config.model, rng, dtype)
        m = config.model
        self.bank = LatentBank(len(self.shape_ids), len(self.frame_ids), m.shape_dim, m.pose_dim, rng, config.code_init_std, dtype)
        self.optimizer = Adam(self.parameters(), config.lr, sparse_rows=("bank.shape", "bank.pose"))
        self.epoch = 0
        self.step = 0
        self.log: list[dict] = []

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.model.parameters())
        params.update(self.bank.parameters())
        return params

    # batches -------------------------------------------------------------

    def _items(self, frame_batch, rng: np.random.Generator) -> list[L.BatchItem]:
        cfg, ds = self.config, self.dataset
        items = []
        for fid in frame_batch:
            fr = ds.frames[fid]
            ident = ds.identities[fr.identity]
            nxt = ds.next_frame(fid)
            if nxt is not None and nxt not in self.pose_row:
                nxt = None
            srow, prow = self.shape_row[fr.identity], self.pose_row[fid]
            if cfg.supervised:
                idx = sample_points(len(ident.canonical), cfg.points, rng)
                canon = ident.canonical[idx]
                items.append(
                    L.BatchItem(
                        canon, srow, prow, ident.canonical,
                        next_points=canon if nxt is not None else None,
                        next_pose_row=self.pose_row.get(nxt),
                        gt_posed=fr.cloud[idx],
                    )
                )
                continue
            pts = fr.cloud[sample_points(len(fr.cloud), cfg.points, rng)]
            nxt_pts = None
            if nxt is not None:
                nc = ds.frames[nxt].cloud
                nxt_pts = nc[sample_points(len(nc), cfg.points, rng)]
            items.append(L.BatchItem(pts, srow, prow, ident.canonical, nxt_pts, self.pose_row.get(nxt)))
        return items

    def objective(self, items: list[L.BatchItem], epoch: float) -> L.LossTerms:
        if self.config.supervised:
            return L.supervised_train_objective(items, self.model, self.bank, self.config.weights)
        return L.train_objective(items, self.model, self.bank, self.config.weights, epoch, self.config.epochs)

    def train_epoch(self) -> list[dict]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = rng.permutation(self.frame_ids)
        lr = lr_schedule(self.epoch, cfg.lr, cfg.lr_decay, cfg.lr_step)
        rows = []
        for start in range(0, len(order), cfg.batch_size):
            items = self._items(order[start : start + cfg.batch_size], rng)
            self.optimizer.zero_grad()
            terms = self.objective(items, self.epoch)
            terms.total.backward()
            self.optimizer.step(lr)
            row = {"step": self.step, "epoch": self.epoch, **{k: terms.terms[k] for k in L.LOG_COLUMNS[2:]}}
            rows.append(row)
            self.step += 1
        self.log.extend(rows)
        if self.verbose:
            mean = {k: np.mean([r[k] for r in rows]) for k in ("loop", "icp", "total")}
            print(
                f"epoch {self.epoch:4d} lr {lr:.2e} lambda_icp {rows[-1]['lambda_icp']:.4f} "
                f"loop {mean['loop']:.5f} icp {mean['icp']:.5f} total {mean['total']:.5f}",
                file=sys.stdout,
                flush=True,
            )
        self.epoch += 1
        return rows

    def run(self, until_epoch: int | None = None) -> list[dict]:
        until = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < until:
            self.train_epoch()
        return self.log

    def epoch_mean(self, key: str, epoch: int) -> float:
        vals = [r[key] for r in self.log if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    # codes ------------------------------------------------------------------

    def codes_for_frame(self, frame_id: int) -> tuple[np.ndarray, np.ndarray]:
        fr = self.dataset.frames[frame_id]
        s = self.bank.shape_codes.values[self.shape_row[fr.identity]]
        p = self.bank.pose_codes.values[self.pose_row[frame_id]]
        return s, p


def train(dataset: Dataset, config: TrainConfig, verbose: bool = False) -> Trainer:
    trainer = Trainer(dataset, config, verbose)
    trainer.run()
    return trainer


# -- test-time fitting -----------------------------------------------------------------------


@dataclass
class FitResult:
    shape_code: np.ndarray
    pose_codes: np.ndarray  # [F, D_p]
    history: list[list[float]]  # per frame: L_loop before each iteration, then final
    baseline: list[float]  # per frame: L_loop at the mean codes


def fit_sequence(model, clouds: list[np.ndarray], mean_shape, mean_pose, cfg: FitConfig, canonical: np.ndarray | None = None, warm_start: bool | None = None) -> FitResult:
    """Optimise one shared shape code and per-frame pose codes with frozen weights.

    Frames are processed in order. The shape code starts at ``mean_shape`` and
    carries over between frames; frame 0's pose starts at ``mean_pose`` and each
    later frame starts from the previous result (or the mean when
    ``warm_start`` is off). Supervised models need ``canonical`` and use the
    Chamfer + ICP objective.
    """
    warm = cfg.warm_start if warm_start is None else warm_start
    rng = np.random.default_rng(cfg.seed)
    dtype = model.dtype
    supervised = isinstance(model, SupervisedGnpm)
    if supervised and canonical is None:
        raise ValueError("supervised fitting needs the canonical cloud")
    shape = Tensor(mean_shape, requires_grad=True, dtype=dtype)
    mean_pose = np.asarray(mean_pose, dtype=dtype)
    poses, history, baseline = [], [], []
    prev = mean_pose

    def objective(pts, canon, s, p):
        if supervised:
            return L.supervised_test_objective(pts, canon, model, s, p, cfg.lambda_icp, cfg.sigma_s, cfg.sigma_p)
        return L.test_objective(pts, model, s, p, cfg.sigma_s, cfg.sigma_p)

    def loop_value(terms):
        return terms.terms["chamfer" if supervised else "loop"]

    with frozen(model.parameters()):
        for cloud in clouds:
            n = min(cfg.points, len(cloud))
            pts = cloud[sample_points(len(cloud), n, rng)]
            canon = None
            if supervised:
                canon = canonical[sample_points(len(canonical), min(cfg.points, len(canonical)), rng)]
            baseline.append(loop_value(objective(pts, canon, Tensor(mean_shape, dtype=dtype), Tensor(mean_pose, dtype=dtype))))
            pose = Tensor(prev if warm else mean_pose, requires_grad=True, dtype=dtype)
            opt = Adam({"shape": shape, "pose": pose}, cfg.lr)
            trace = []
            for it in range(cfg.iterations):
                opt.zero_grad()
                terms = objective(pts, canon, shape, pose)
                trace.append(loop_value(terms))
                terms.total.backward()
                opt.step(lr_schedule(it, cfg.lr, cfg.lr_decay, cfg.lr_step))
            trace.append(loop_value(objective(pts, canon, shape, pose)))
            history.append(trace)
            poses.append(pose.values.copy())
            prev = pose.values.copy()
    return FitResult(shape.values.copy(), np.stack(poses) if poses else np.zeros((0, len(mean_pose))), history, baseline)


def fit(trainer_or_model, clouds: list[np.ndarray], cfg: FitConfig, bank: LatentBank | None = None, canonical=None) -> FitResult:
    """Fit a sequence starting from the mean trained codes."""
    if isinstance(trainer_or_model, Trainer):
        model, bank = trainer_or_model.model, trainer_or_model.bank
    else:
        model = trainer_or_model
    if bank is None:
        raise ValueError("fit needs the trained latent bank for its mean codes")
    return fit_sequence(model, clouds, bank.mean_shape(), bank.mean_pose(), cfg, canonical)
