"""Central finite-difference checks of every differentiable piece, in float64.

Each case draws a random instance, evaluates the analytic gradient of a scalar
function by :meth:`Tensor.backward` and compares it with central differences
of step ``h``. Small inputs are checked element by element; large ones along
random unit directions. Instances where a perturbed evaluation takes a
different discrete branch (sign, argmax, neighbour set) than the centre point
are redrawn, since the derivative is not defined across such a switch.

Error measure: ``|a - n| / max(|a|, |n|, floor)`` per instance, where ``a``
and ``n`` are the analytic and numeric gradient vectors (2-norm of the
difference and of the vectors).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import branches
from . import losses as L
from . import tensor as T
from .config import LossWeights, ModelConfig, PosEncodeConfig
from .evaluate import chamfer_l2
from .graphnet import EdgeConvLayer, EdgeConvStack, pos_encode
from .model import GnpmModel, LatentBank, SupervisedGnpm
from .tensor import Tensor

F64 = np.float64
ELEMENTWISE_LIMIT = 48  # inputs with at most this many entries are checked per element


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    redraws: int
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


# A case builder takes a generator and returns (fn, leaves): ``leaves`` are the
# float64 tensors to differentiate (fresh inputs or live module parameters) and
# ``fn()`` evaluates the scalar using them.
Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _evaluate(fn, leaves: list[Tensor], values: list[np.ndarray]) -> tuple[float, list]:
    for leaf, v in zip(leaves, values):
        leaf.values = v
        leaf.requires_grad = False
    with branches.recording() as rec:
        out = float(fn().values)
    return out, rec


def _analytic(fn, leaves: list[Tensor], values: list[np.ndarray]):
    for leaf, v in zip(leaves, values):
        leaf.values = v
        leaf.requires_grad = True
        leaf.grad = np.zeros_like(v)
    with branches.recording() as rec:
        out = fn()
    out.backward()
    return [leaf.grad.copy() for leaf in leaves], rec


def check_instance(fn, leaves: list[Tensor], rng: np.random.Generator, h: float = 1e-6, directions: int = 2, floor: float = 1e-8):
    """Return the relative error, or ``None`` if a perturbation switches branches."""
    base = [np.asarray(leaf.values, dtype=F64).copy() for leaf in leaves]
    for leaf in leaves:
        if leaf.values.dtype != F64:
            raise TypeError("gradcheck needs float64 leaves")
    try:
        grads, rec0 = _analytic(fn, leaves, base)
        numeric, analytic = [], []
        if sum(a.size for a in base) <= ELEMENTWISE_LIMIT:
            probes = []
            for i, a in enumerate(base):
                for j in range(a.size):
                    d = [np.zeros_like(x) for x in base]
                    d[i].flat[j] = 1.0
                    probes.append(d)
        else:
            probes = []
            for _ in range(directions):
                d = [rng.standard_normal(a.shape) for a in base]
                norm = np.sqrt(sum(float((x * x).sum()) for x in d))
                probes.append([x / norm for x in d])
        for d in probes:
            fp, rp = _evaluate(fn, leaves, [a + h * x for a, x in zip(base, d)])
            fm, rm = _evaluate(fn, leaves, [a - h * x for a, x in zip(base, d)])
            if not (branches.same(rec0, rp) and branches.same(rec0, rm)):
                return None
            numeric.append((fp - fm) / (2 * h))
            analytic.append(sum(float((g * x).sum()) for g, x in zip(grads, d)))
    finally:
        for leaf, v in zip(leaves, base):
            leaf.values = v
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def run_case(name: str, build: Builder, instances: int = 100, seed: int = 0, h: float = 1e-6, max_redraws: int | None = None) -> CaseResult:
    rng = np.random.default_rng([seed, _stable_hash(name)])
    max_redraws = 10 * instances if max_redraws is None else max_redraws
    worst, done, redraws = 0.0, 0, 0
    t0 = time.perf_counter()
    while done < instances:
        fn, leaves = build(rng)
        err = check_instance(fn, leaves, rng, h)
        if err is None:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"gradcheck {name}: too many branch switches ({redraws})")
            continue
        worst = max(worst, err)
        done += 1
    return CaseResult(name, done, worst, redraws, time.perf_counter() - t0)


def _stable_hash(name: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(name))


# -- primitive ops ------------------------------------------------------------------


def _leaves(*arrays) -> list[Tensor]:
    return [Tensor(np.asarray(a, dtype=F64), requires_grad=True, dtype=F64) for a in arrays]


def _shape(rng, lo=1, hi=4, ndim=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] >= 0, 1.0, -1.0) * 2 * margin
    return x


def _normal(rng, shape):
    return rng.standard_normal(shape)


def _positive(rng, shape):
    return np.abs(rng.standard_normal(shape)) + 0.2


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    """Random linear functional so every output entry carries gradient."""
    return (out * w).sum()


def _unary(op, sampler):
    def build(rng):
        (x,) = _leaves(sampler(rng, _shape(rng)))
        w = rng.standard_normal(op(x.detach()).shape)
        return (lambda: _contract(op(x), w)), [x]

    return build


def _binary(op, positive_b=False):
    def build(rng):
        shape = _shape(rng)
        b_shape = shape if rng.random() < 0.5 else (1, shape[1])  # exercise broadcasting
        b = rng.standard_normal(b_shape)
        a, b = _leaves(rng.standard_normal(shape), np.abs(b) + 0.5 if positive_b else b)
        w = rng.standard_normal(shape)
        return (lambda: _contract(op(a, b), w)), [a, b]

    return build


def _build_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 4, size=3))
    batch = int(rng.integers(1, 3))
    a, b = _leaves(rng.standard_normal((batch, m, k)), rng.standard_normal((k, n)))
    w = rng.standard_normal((batch, m, n))
    return (lambda: _contract(a @ b, w)), [a, b]


def _build_concat(rng):
    n = int(rng.integers(1, 4))
    a, b = _leaves(rng.standard_normal((n, 2)), rng.standard_normal((n, 3)))
    w = rng.standard_normal((n, 5))
    return (lambda: _contract(T.concat([a, b]), w)), [a, b]


def _build_gather(rng):
    n = int(rng.integers(2, 6))
    (x,) = _leaves(rng.standard_normal((n, 3)))
    idx = rng.integers(0, n, size=int(rng.integers(1, 8)))  # repeats exercise scatter-add
    w = rng.standard_normal((len(idx), 3))
    return (lambda: _contract(T.gather_rows(x, idx), w)), [x]


def _build_getitem(rng):
    (x,) = _leaves(rng.standard_normal((4, 5)))
    if rng.random() < 0.5:
        index = (slice(1, 3), slice(None, None, 2))
    else:
        index = (rng.integers(0, 4, size=3), slice(None))  # repeated rows accumulate
    w = rng.standard_normal(x.values[index].shape)
    return (lambda: _contract(x[index], w)), [x]


def _build_reshape(rng):
    (x,) = _leaves(rng.standard_normal((2, 6)))
    w = rng.standard_normal((3, 4))
    return (lambda: _contract(x.reshape(3, 4), w)), [x]


def _build_broadcast(rng):
    (x,) = _leaves(rng.standard_normal((1, 3)))
    w = rng.standard_normal((4, 3))
    return (lambda: _contract(T.broadcast_to(x, (4, 3)), w)), [x]


def _reduce_builder(op):
    def build(rng):
        (x,) = _leaves(rng.standard_normal(_shape(rng, 2, 4, ndim=3)))
        axis = int(rng.integers(0, 3))
        w = rng.standard_normal(op(x.detach(), axis).shape)
        return (lambda: _contract(op(x, axis), w)), [x]

    return build


OP_CASES: dict[str, Builder] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "matmul": _build_matmul,
    "concat": _build_concat,
    "gather_rows": _build_gather,
    "getitem": _build_getitem,
    "reshape": _build_reshape,
    "broadcast_to": _build_broadcast,
    "reduce_sum": _reduce_builder(lambda t, a: t.sum(axis=a)),
    "reduce_mean": _reduce_builder(lambda t, a: t.mean(axis=a)),
    "reduce_max": _reduce_builder(lambda t, a: T.reduce_max(t, a)[0]),
    "leaky_relu": _unary(lambda t: T.leaky_relu(t, 0.2), _away_from_zero),
    "abs": _unary(T.abs, _away_from_zero),
    "sqrt": _unary(T.sqrt, _positive),
    "square": _unary(T.square, _normal),
    "sin": _unary(T.sin, _normal),
    "cos": _unary(T.cos, _normal),
    "pos_encode": _unary(lambda t: pos_encode(t, PosEncodeConfig(bands=3)), lambda rng, s: rng.uniform(-1, 1, (s[0], 3))),
}


# -- layers and stacks ----------------------------------------------------------------


def tiny_model_config() -> ModelConfig:
    return ModelConfig(edge_dims=(5, 4, 6), head_hidden=5, shape_dim=2, pose_dim=3, k=3, head_init_scale=1.0, pe=PosEncodeConfig(bands=2))


def _build_edgeconv(rng):
    n, d, h, k = int(rng.integers(5, 9)), int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    layer = EdgeConvLayer(d, h, k, rng, F64, 0.2, block=int(rng.integers(1, n + 1)))
    (x,) = _leaves(rng.standard_normal((n, d)))
    w = rng.standard_normal((n, h))
    return (lambda: _contract(layer(x), w)), [x, *layer.parameters().values()]


def _build_stack(rng):
    cfg = tiny_model_config()
    stack = EdgeConvStack(cfg, rng, F64)
    n = int(rng.integers(6, 10))
    x, s, p = _leaves(rng.uniform(-1, 1, (n, 3)), rng.standard_normal(cfg.shape_dim), rng.standard_normal(cfg.pose_dim))
    w = rng.standard_normal((n, 3))
    return (lambda: _contract(stack(pos_encode(x, cfg.pe), s, p), w)), [x, s, p, *stack.parameters().values()]


def _build_cycle(rng):
    cfg = tiny_model_config()
    model = GnpmModel(cfg, rng, F64)
    n = int(rng.integers(6, 10))
    x, s, p = _leaves(rng.uniform(-1, 1, (n, 3)), rng.standard_normal(cfg.shape_dim), rng.standard_normal(cfg.pose_dim))
    w = rng.standard_normal((n, 3))
    return (lambda: _contract(model.cycle(x, s, p).x_tilde, w)), [x, s, p, *model.parameters().values()]


LAYER_CASES: dict[str, Builder] = {
    "edgeconv_layer": _build_edgeconv,
    "edgeconv_stack": _build_stack,
    "cycle_model": _build_cycle,
}


# -- losses --------------------------------------------------------------------


def _points(rng, n=None):
    n = int(rng.integers(3, 7)) if n is None else n
    return rng.standard_normal((n, 3))


def _pair_builder(loss, same_size=True, both=True):
    def build(rng):
        a = _points(rng)
        b = _points(rng, len(a) if same_size else None)
        if both:
            ta, tb = _leaves(a, b)
            return (lambda: loss(ta, tb)), [ta, tb]
        (ta,) = _leaves(a)
        return (lambda: loss(ta, b)), [ta]

    return build


def _build_lt(rng):
    d = int(rng.integers(2, 6))
    a, b = _leaves(rng.standard_normal(d), rng.standard_normal(d))
    return (lambda: L.l_latent_temporal(a, b)), [a, b]


def _build_prior(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5))) if rng.random() < 0.5 else (int(rng.integers(2, 6)),)
    (c,) = _leaves(rng.standard_normal(shape))
    return (lambda: L.l_code_prior(c)), [c]


def _cycle_setup(rng, supervised=False):
    cfg = tiny_model_config()
    model = (SupervisedGnpm if supervised else GnpmModel)(cfg, rng, F64)
    bank = LatentBank(2, 4, cfg.shape_dim, cfg.pose_dim, rng, 0.5, F64)
    n = 8
    canonical = rng.uniform(-1, 1, (12, 3))
    items = []
    for f in range(2):
        pts = canonical[rng.choice(12, n, replace=False)] if supervised else rng.uniform(-1, 1, (n, 3))
        has_next = f == 0
        nxt = (pts if supervised else rng.uniform(-1, 1, (n, 3))) if has_next else None
        gt = rng.uniform(-1, 1, (n, 3)) if supervised else None
        items.append(L.BatchItem(pts, f % 2, 2 * f, canonical, nxt, 2 * f + 1 if has_next else None, gt))
    leaves = [*model.parameters().values(), *bank.parameters().values()]
    return model, bank, items, leaves


def _build_train_objective(rng):
    model, bank, items, leaves = _cycle_setup(rng)
    weights = LossWeights(icp_mode=str(rng.choice(["match", "score", "chamfer"])))
    return (lambda: L.train_objective(items, model, bank, weights, 3.0, 10).total), leaves


def _build_supervised_objective(rng):
    model, bank, items, leaves = _cycle_setup(rng, supervised=True)
    return (lambda: L.supervised_train_objective(items, model, bank, LossWeights()).total), leaves


def _build_test_objective(rng):
    cfg = tiny_model_config()
    model = GnpmModel(cfg, rng, F64)
    pts = rng.uniform(-1, 1, (8, 3))
    s, p = _leaves(rng.standard_normal(cfg.shape_dim), rng.standard_normal(cfg.pose_dim))
    return (lambda: L.test_objective(pts, model, s, p, 1e-4, 1e-4).total), [s, p]


def _build_supervised_test_objective(rng):
    cfg = tiny_model_config()
    model = SupervisedGnpm(cfg, rng, F64)
    pts = rng.uniform(-1, 1, (9, 3))
    canon = rng.uniform(-1, 1, (8, 3))
    s, p = _leaves(rng.standard_normal(cfg.shape_dim), rng.standard_normal(cfg.pose_dim))
    return (lambda: L.supervised_test_objective(pts, canon, model, s, p, 1e-2, 1e-4, 1e-4).total), [s, p]


LOSS_CASES: dict[str, Builder] = {
    "l1_points": _pair_builder(L.l1_points),
    "l_loop": _pair_builder(L.l_loop, both=False),
    "l_reco": _pair_builder(L.l_reco, both=False),
    "l_icp_match": _pair_builder(lambda a, b: L.l_icp(a, b, "match"), same_size=False, both=False),
    "l_icp_score": _pair_builder(lambda a, b: L.l_icp(a, b, "score"), same_size=False, both=False),
    "l_icp_chamfer": _pair_builder(lambda a, b: L.l_icp(a, b, "chamfer"), same_size=False, both=False),
    "l_latent_temporal": _build_lt,
    "l_spatial_temporal": _pair_builder(L.l_spatial_temporal),
    "l_code_prior": _build_prior,
    "chamfer_l2": _pair_builder(chamfer_l2, same_size=False),
    "train_objective": _build_train_objective,
    "supervised_train_objective": _build_supervised_objective,
    "test_objective": _build_test_objective,
    "supervised_test_objective": _build_supervised_test_objective,
}

ALL_CASES: dict[str, Builder] = {**OP_CASES, **LAYER_CASES, **LOSS_CASES}


def run_suite(instances: int = 100, seed: int = 0, h: float = 1e-6, names=None, progress=None) -> list[CaseResult]:
    results = []
    for name in names or ALL_CASES:
        res = run_case(name, ALL_CASES[name], instances, seed, h)
        if progress is not None:
            progress(res)
        results.append(res)
    return results
