"""Acceptance criteria 1-10 at their stated tolerances.

Each test prints one ``CRITERION n PASS|FAIL ...`` line (also repeated in the
terminal summary). The three long training runs are shared session fixtures.
Set ``GNPM_ACCEPTANCE_CACHE=<dir>`` to keep their checkpoints between
sessions; a cached run is reused only if its saved config equals the preset
and it reached the final epoch, and its recorded wall time is reported.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnpm import presets
from gnpm.checkpoint import load_checkpoint, restore_trainer, save_checkpoint
from gnpm.config import LossWeights, ModelConfig, PosEncodeConfig, TrainConfig, to_dict
from gnpm.data import DataSpec, generate, pose_points
from gnpm.evaluate import chamfer_l2, epe, kmeans_labels, purity, track_keyframe, transfer
from gnpm.gradcheck import ALL_CASES, run_suite
from gnpm.knn import bench_knn, knn_blocked, knn_brute
from gnpm.optim import Trainer, fit

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []
CACHE = os.environ.get("GNPM_ACCEPTANCE_CACHE")


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    sys.__stdout__.write("\n" + line + "\n")
    sys.__stdout__.flush()


# -- shared runs ------------------------------------------------------------------


def _trained(name: str, ds, cfg: TrainConfig) -> tuple[Trainer, float]:
    if CACHE:
        path = Path(CACHE) / f"{name}.ckpt"
        side = path.with_suffix(".json")
        if path.exists() and side.exists():
            ck = load_checkpoint(path)
            if to_dict(ck.config) == to_dict(cfg) and ck.epoch == cfg.epochs:
                return restore_trainer(ck, ds), json.loads(side.read_text())["seconds"]
    t0 = time.perf_counter()
    tr = Trainer(ds, cfg)
    tr.run()
    seconds = time.perf_counter() - t0
    if CACHE:
        Path(CACHE).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(CACHE) / f"{name}.ckpt", tr)
        (Path(CACHE) / f"{name}.json").write_text(json.dumps({"seconds": seconds}))
    return tr, seconds


@pytest.fixture(scope="session")
def dataset():
    return generate(presets.data_spec())


@pytest.fixture(scope="session")
def cycle_run(dataset):
    return _trained("cycle", dataset, presets.cycle_config(icp=True))


@pytest.fixture(scope="session")
def no_icp_run(dataset):
    return _trained("cycle_no_icp", dataset, presets.cycle_config(icp=False))


@pytest.fixture(scope="session")
def supervised_run(dataset):
    return _trained("supervised", dataset, presets.supervised_config())


def _train_sequences(ds):
    return ds.sequences_in("train")


def keyframe_epe(tr: Trainer) -> tuple[float, float]:
    """Mean EPE of keyframe tracking over training frames, and the zero-deformation EPE."""
    ds = tr.dataset
    pred_err, base_err = [], []
    for seq in _train_sequences(ds):
        key = ds.frames[seq.frames[0]].cloud
        s, p_key = tr.codes_for_frame(seq.frames[0])
        for f in seq.frames[1:]:
            _, p = tr.codes_for_frame(f)
            pred = track_keyframe(tr.model, key, s, p_key, p)
            gt = ds.frames[f].cloud - key
            pred_err.append(epe(pred - key, gt))
            base_err.append(epe(np.zeros_like(gt), gt))
    return float(np.mean(pred_err)), float(np.mean(base_err))


def canonical_chamfer(tr: Trainer) -> float:
    ds = tr.dataset
    vals = []
    for f in tr.frame_ids:
        s, p = tr.codes_for_frame(f)
        _, y = tr.model.forward_deform(ds.frames[f].cloud, s, p)
        vals.append(chamfer_l2(y.values, ds.identities[ds.frames[f].identity].canonical))
    return float(np.mean(vals))


def final_loop(tr: Trainer) -> float:
    return tr.epoch_mean("loop", tr.epoch - 1)


# -- 1: gradients ----------------------------------------------------------------------


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = run_suite(instances=100, seed=0, h=1e-6)
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed(1e-5) or r.instances < 100]
    ok = not failed and seconds < 300 and len(results) == len(ALL_CASES)
    record(1, ok, f"{len(results)} cases x 100 instances, worst {worst.name} {worst.max_rel_error:.2e} (< 1e-5), {seconds:.0f}s (< 300s) failed={failed}")
    assert ok


# -- 2: knn oracle ---------------------------------------------------------------------


def _random_case(rng):
    n = int(rng.integers(2, 300))
    d = int(rng.choice([1, 2, 3, 3, 3, 4, 8, 9, 16, 35, 64]))
    k = int(rng.integers(1, min(n - 1, 20) + 1))
    block = int(rng.integers(1, n + 1))
    kind = rng.integers(0, 4)
    if kind == 0:
        pts = rng.integers(-2, 3, (n, d)).astype(np.float64)  # heavy ties
    elif kind == 1:
        base = rng.standard_normal((max(1, n // 4), d))
        pts = base[rng.integers(0, len(base), n)]  # exact duplicates
    elif kind == 2:
        pts = rng.standard_normal((n, d)) * 10.0 ** rng.uniform(-4, 4) + rng.uniform(-1e3, 1e3)
    else:
        pts = rng.standard_normal((n, d)).astype(np.float32)
    return pts, k, block


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 80), st.integers(1, 10), st.data())
def _graph_invariants(n, d, data):
    k = data.draw(st.integers(1, n - 1))
    block = data.draw(st.integers(1, n))
    pts = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))).integers(-3, 4, (n, d)).astype(float)
    g = knn_blocked(pts, k, block)
    assert g.idx.shape == (n, k)
    assert (g.idx != np.arange(n)[:, None]).all()
    assert all(len(set(r)) == k for r in g.idx)
    assert (np.diff(g.dist2, axis=1) >= 0).all()
    assert (np.diff(g.idx, axis=1)[np.diff(g.dist2, axis=1) == 0] > 0).all()
    full = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(full, np.inf)
    np.testing.assert_array_equal(np.sort(full, axis=1)[:, :k], g.dist2)


def test_criterion_2_knn_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        pts, k, block = _random_case(rng)
        a, b = knn_brute(pts, k), knn_blocked(pts, k, block)
        if not (np.array_equal(a.idx, b.idx) and a.dist2.tobytes() == b.dist2.tobytes()):
            mismatches += 1
    _graph_invariants()
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 120
    record(2, ok, f"1000 random (N,D,k,B) cases, {mismatches} bitwise mismatches, invariants hold on 200 property examples, {seconds:.0f}s (< 120s)")
    assert ok


# -- 3: knn performance ---------------------------------------------------------------


def test_criterion_3_knn_performance():
    t0 = time.perf_counter()
    naive, blocked = bench_knn(n=4096, d=3, k=10, block=256, seed=0, repeats=3)
    seconds = time.perf_counter() - t0
    speed = naive["wall_ms"] / blocked["wall_ms"]
    mem = blocked["peak_aux_bytes"] / naive["peak_aux_bytes"]
    ok = speed >= 2.0 and mem < 0.25 and seconds < 60
    record(3, ok, f"N=4096 D=3 k=10: speedup {speed:.1f}x (>= 2), peak aux memory {100 * mem:.1f}% of naive (< 25%), {seconds:.0f}s (< 60s)")
    assert ok


# -- 4 / 5: cycle training and the ICP anchor ------------------------------------------


def test_criterion_4_cycle_training(cycle_run):
    tr, seconds = cycle_run
    loop0, loop_end = tr.epoch_mean("loop", 0), final_loop(tr)
    pred, base = keyframe_epe(tr)
    ok = loop_end <= 0.1 * loop0 and pred <= 0.5 * base
    record(
        4,
        ok,
        f"L_loop {loop0:.5f} -> {loop_end:.5f} (ratio {loop_end / loop0:.3f} <= 0.1); "
        f"EPE {pred:.4f} vs zero-deformation {base:.4f} (ratio {pred / base:.3f} <= 0.5)",
    )
    assert ok


def test_criterion_4_runtime(cycle_run):
    _, seconds = cycle_run
    ok = seconds < 30 * 60
    record(4, ok, f"runtime of the 300-epoch cycle run {seconds / 60:.1f} min (target < 30 min)")
    assert ok


def test_criterion_5_icp_anchor(cycle_run, no_icp_run):
    tr, _ = cycle_run
    tr0, _ = no_icp_run
    loop4, loop5 = final_loop(tr), final_loop(tr0)
    cd4, cd5 = canonical_chamfer(tr), canonical_chamfer(tr0)
    ok = loop5 <= 2.0 * loop4 and cd5 >= 5.0 * cd4
    record(
        5,
        ok,
        f"lambda_icp=0: L_loop {loop5:.2e} vs {loop4:.2e} (ratio {loop5 / loop4:.3f} <= 2); "
        f"canonical Chamfer-l2 {cd5:.5f} vs {cd4:.5f} (ratio {cd5 / cd4:.1f} >= 5)",
    )
    assert ok


# -- 6: test-time fit -----------------------------------------------------------------


def test_criterion_6_fit(cycle_run):
    tr, _ = cycle_run
    ds = tr.dataset
    seq = ds.sequences_in("heldout_pose")[0]
    assert ds.identities[seq.identity].split == "train"
    clouds = [ds.frames[f].cloud for f in seq.frames]
    res = fit(tr, clouds, presets.fit_config())
    base = np.asarray(res.baseline)
    final = np.array([h[-1] for h in res.history])
    ratio = float(np.mean(final / base))
    # iterations until a warm-started frame first reaches half its mean-code loss
    reach = []
    for h, b in zip(res.history[1:], base[1:]):
        hits = np.flatnonzero(np.asarray(h) <= 0.5 * b)
        reach.append(int(hits[0]) if hits.size else len(h))
    mean_reach = float(np.mean(reach))
    ok = ratio <= 0.5 and mean_reach <= 100
    record(6, ok, f"sequence {seq.id}: fitted/mean-code L_loop {ratio:.3f} (<= 0.5); warm-started frames reach half in {mean_reach:.1f} iterations on average (<= 100)")
    assert ok


# -- 7: supervised variant -------------------------------------------------------------


def test_criterion_7_supervised(supervised_run):
    tr, _ = supervised_run
    ds = tr.dataset
    err, base = [], []
    for f in tr.frame_ids:
        fr = ds.frames[f]
        canon = ds.identities[fr.identity].canonical
        s, p = tr.codes_for_frame(f)
        _, pred = tr.model.deform(canon, s, p)
        err.append(np.abs(pred.values - fr.cloud).sum(-1).mean())
        base.append(np.abs(canon - fr.cloud).sum(-1).mean())
    ratio = float(np.mean(err) / np.mean(base))
    ok = ratio <= 0.2
    record(7, ok, f"per-point L1 {np.mean(err):.5f} vs identity {np.mean(base):.5f} (ratio {ratio:.3f} <= 0.2)")
    assert ok


# -- 8: latent transfer ----------------------------------------------------------------


def test_criterion_8_transfer(cycle_run):
    tr, _ = cycle_run
    ds = tr.dataset
    exact = True
    for seq in _train_sequences(ds):
        canon = ds.identities[seq.identity].canonical
        for f in seq.frames[::5]:
            s, p = tr.codes_for_frame(f)
            recon = tr.model.backward_deform(canon, s, p)[1].values
            exact &= np.array_equal(transfer(s, p, canon, tr.model), recon)
    moved, still = [], []
    spec = ds.spec
    for a in tr.shape_ids:
        ident = ds.identities[a]
        s_a = tr.bank.shape_codes.values[tr.shape_row[a]]
        for seq in _train_sequences(ds):
            if seq.identity == a:
                continue
            for f in seq.frames[::4]:
                p_b = tr.codes_for_frame(f)[1]
                gt = pose_points(ident, ds.frames[f].angles, spec.blend)
                moved.append(chamfer_l2(transfer(s_a, p_b, ident.canonical, tr.model), gt))
                still.append(chamfer_l2(ident.canonical, gt))
    ok = exact and np.mean(moved) < np.mean(still)
    record(8, ok, f"own-code decode bit-identical={exact}; cross-identity transfer Chamfer-l2 {np.mean(moved):.5f} vs identity {np.mean(still):.5f} over {len(moved)} pairs")
    assert ok


# -- 9: determinism and resume ---------------------------------------------------------


def _small_setup():
    ds = generate(DataSpec(identities=2, sequences=1, heldout_sequences=0, frames=6, points=96, seed=5))
    model = ModelConfig(edge_dims=(12, 12, 16), head_hidden=16, shape_dim=8, pose_dim=8, pe=PosEncodeConfig(bands=4))
    cfg = TrainConfig(epochs=10, batch_size=2, points=64, lr_step=3, model=model, weights=LossWeights(icp_mode="chamfer", icp_init=10.0, icp_min=1.0))
    return ds, cfg


def test_criterion_9_determinism_resume(tmp_path):
    ds, cfg = _small_setup()
    a = Trainer(ds, cfg)
    a.run()
    b = Trainer(ds, cfg)
    b.run()
    identical = a.log == b.log and all(np.array_equal(p.values, b.parameters()[k].values) for k, p in a.parameters().items())
    half = Trainer(ds, cfg)
    half.run(5)
    save_checkpoint(tmp_path / "half.ckpt", half)
    resumed = restore_trainer(load_checkpoint(tmp_path / "half.ckpt"), ds)
    resumed.run()
    full = np.array([r["total"] for r in a.log])
    res = np.array([r["total"] for r in resumed.log])
    rel = float(np.max(np.abs(full - res) / np.abs(full))) if len(full) == len(res) else np.inf
    ok = identical and rel <= 1e-6
    record(9, ok, f"two fixed-seed runs identical={identical}; 10 epochs vs 5 + save/load + 5: max relative loss difference {rel:.1e} (<= 1e-6)")
    assert ok


# -- 10: segmentation diagnostic -------------------------------------------------------


def test_criterion_10_segmentation(cycle_run):
    tr, _ = cycle_run
    ds = tr.dataset
    scores, repeat_same = [], True
    for seq in _train_sequences(ds):
        f = seq.frames[len(seq.frames) // 2]
        fr = ds.frames[f]
        s, p = tr.codes_for_frame(f)
        feats = tr.model.first_layer_features(fr.cloud, s, p)
        labels = kmeans_labels(feats, 2, seed=0)
        repeat_same &= np.array_equal(labels, kmeans_labels(tr.model.first_layer_features(fr.cloud, s, p), 2, seed=0))
        scores.append(purity(labels, ds.identities[fr.identity].parts))
    record(10, repeat_same, f"k-means (k=2) purity vs GT links {np.mean(scores):.3f} (per sequence {', '.join(f'{v:.2f}' for v in scores)}; non-gating); deterministic={repeat_same}")
    assert repeat_same
