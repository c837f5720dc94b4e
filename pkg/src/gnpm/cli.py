"""Command-line entry point: ``python3 -m gnpm <command> ...`` (or the ``gnpm`` script).

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
single JSON line ``{"error": <kind>, "message": <text>}`` to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import FitConfig, load_config
from .data import generate, load_data_spec, load_dataset, save_cloud, save_dataset
from .losses import LOG_COLUMNS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse calls this for bad/missing flags
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


@contextlib.contextmanager
def _thread_limit():
    raw = os.environ.get("GNPM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GNPM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("GNPM_THREADS must be >= 0")
    if n == 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = load_data_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate(spec)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames, {len(ds.identities)} identities -> {manifest}")
    return 0


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in LOG_COLUMNS})


def cmd_train(args) -> int:
    from .optim import Trainer

    if args.resume and args.config:
        raise UsageError("--resume restores the saved config; do not pass --config as well")
    if not args.resume and not args.config:
        raise UsageError("train needs --config (or --resume)")
    if args.epochs is not None and args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    ds = load_dataset(args.data)
    if args.resume:
        trainer = ckpt_io.restore_trainer(ckpt_io.load_checkpoint(args.resume), ds, verbose=not args.quiet)
        if args.supervised and not trainer.config.supervised:
            raise UsageError("--supervised contradicts the resumed (cycle) checkpoint")
        if args.epochs is not None:
            if args.epochs < trainer.epoch:
                raise UsageError(f"--epochs {args.epochs} is below the checkpoint's epoch {trainer.epoch}")
            trainer.config.epochs = args.epochs
    else:
        cfg, _ = load_config(args.config)
        if args.supervised:
            cfg.supervised = True
        if args.epochs is not None:
            cfg.epochs = args.epochs
        trainer = Trainer(ds, cfg, verbose=not args.quiet)
    trainer.run()
    ckpt_io.save_checkpoint(args.out, trainer)
    log_path = args.log or str(args.out) + ".log.csv"
    write_log_csv(trainer.log, log_path)
    last = trainer.log[-1] if trainer.log else None
    tail = f" final loop {last['loop']:.6f}" if last else " (no steps run)"
    print(f"saved {args.out} at epoch {trainer.epoch}, step {trainer.step};{tail}; log {log_path}")
    return 0


def _fit_config(args) -> FitConfig:
    cfg = load_config(args.config)[1] if args.config else FitConfig()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.cold:
        cfg.warm_start = False
    return cfg


def _select_sequences(ds, args):
    if args.sequence is not None:
        ids = args.sequence
        for sid in ids:
            if not 0 <= sid < len(ds.sequences):
                raise ValueError(f"unknown sequence {sid}")
        return [ds.sequences[s] for s in ids]
    seqs = ds.sequences_in(args.split)
    if not seqs:
        raise ValueError(f"dataset has no {args.split!r} sequences")
    return seqs


def cmd_fit(args) -> int:
    from .optim import fit_sequence

    ck = ckpt_io.load_checkpoint(args.ckpt)
    model, bank = ckpt_io.build_model(ck)
    ds = load_dataset(args.seq)
    cfg = _fit_config(args)
    out = {}
    for seq in _select_sequences(ds, args):
        clouds = [ds.frames[f].cloud for f in seq.frames]
        canon = ds.identities[seq.identity].canonical if ck.config.supervised else None
        res = fit_sequence(model, clouds, bank.mean_shape(), bank.mean_pose(), cfg, canonical=canon)
        out[f"seq{seq.id}_shape"] = res.shape_code
        out[f"seq{seq.id}_poses"] = res.pose_codes
        out[f"seq{seq.id}_frames"] = np.asarray(seq.frames, dtype=np.int64)
        out[f"seq{seq.id}_history"] = np.asarray([h for h in res.history], dtype=np.float64)
        out[f"seq{seq.id}_baseline"] = np.asarray(res.baseline, dtype=np.float64)
        ratio = np.mean([h[-1] for h in res.history]) / np.mean(res.baseline)
        print(f"sequence {seq.id}: {len(clouds)} frames, mean final/initial objective {ratio:.4f}")
    out["sequences"] = np.asarray([int(k[3:-6]) for k in out if k.endswith("_shape")], dtype=np.int64)
    np.savez(args.out, **out)
    print(f"wrote codes for {len(out['sequences'])} sequence(s) -> {args.out}")
    return 0


def _train_codes(ck, bank, ds, seq):
    rows = {f: i for i, f in enumerate(ck.meta["train_frames"])}
    shape_row = {c: i for i, c in enumerate(ck.meta["shape_ids"])}
    missing = [f for f in seq.frames if f not in rows]
    if missing or seq.identity not in shape_row:
        raise ValueError(f"sequence {seq.id} was not trained; pass --codes from `fit`")
    s = bank.shape_codes.values[shape_row[seq.identity]]
    p = bank.pose_codes.values[[rows[f] for f in seq.frames]]
    return s, p


def cmd_eval(args) -> int:
    from .evaluate import MetricReport, evaluate_sequence

    ck = ckpt_io.load_checkpoint(args.ckpt)
    model, bank = ckpt_io.build_model(ck)
    ds = load_dataset(args.data)
    report = MetricReport(meta={"checkpoint": Path(args.ckpt).name, "dataset": Path(args.data).name, "seed": ck.config.seed})
    if args.codes:
        codes = np.load(args.codes)
        for sid in codes["sequences"]:
            seq = ds.sequences[int(sid)]
            frames = codes[f"seq{sid}_frames"].tolist()
            if frames != seq.frames:
                raise ValueError(f"codes for sequence {sid} do not match the dataset's frames")
            clouds = [ds.frames[f].cloud for f in frames]
            evaluate_sequence(report, int(sid), clouds, model, codes[f"seq{sid}_shape"], codes[f"seq{sid}_poses"])
    else:
        for seq in ds.sequences_in("train"):
            s, p = _train_codes(ck, bank, ds, seq)
            evaluate_sequence(report, seq.id, [ds.frames[f].cloud for f in seq.frames], model, s, p)
    report.write_csv(args.report)
    print(report.summary())
    return 0


def _frame_codes(ck, bank, frame_id: int) -> np.ndarray:
    rows = {f: i for i, f in enumerate(ck.meta["train_frames"])}
    if frame_id not in rows:
        raise ValueError(f"frame {frame_id} has no trained pose code")
    return bank.pose_codes.values[rows[frame_id]]


def _shape_code(ck, bank, identity: int) -> np.ndarray:
    rows = {c: i for i, c in enumerate(ck.meta["shape_ids"])}
    if identity not in rows:
        raise ValueError(f"identity {identity} has no trained shape code")
    return bank.shape_codes.values[rows[identity]]


def cmd_transfer(args) -> int:
    from .evaluate import transfer

    ck = ckpt_io.load_checkpoint(args.ckpt)
    model, bank = ckpt_io.build_model(ck)
    ds = load_dataset(args.data)
    if not 0 <= args.shape_id < len(ds.identities):
        raise ValueError(f"unknown identity {args.shape_id}")
    canonical = ds.identities[args.shape_id].canonical
    posed = transfer(_shape_code(ck, bank, args.shape_id), _frame_codes(ck, bank, args.pose_frame), canonical, model)
    save_cloud(args.out, posed, np.arange(len(posed)), ds.identities[args.shape_id].parts)
    print(f"wrote identity {args.shape_id} in the pose of frame {args.pose_frame} -> {args.out}")
    return 0


def cmd_interp(args) -> int:
    from .evaluate import interpolate, transfer

    ck = ckpt_io.load_checkpoint(args.ckpt)
    model, bank = ckpt_io.build_model(ck)
    if args.kind == "pose":
        a, b = _frame_codes(ck, bank, args.a), _frame_codes(ck, bank, args.b)
    else:
        a, b = _shape_code(ck, bank, args.a), _shape_code(ck, bank, args.b)
    code = interpolate(a, b, args.t)
    if args.out:
        if args.data is None or (args.shape_id is None and args.kind == "pose"):
            raise UsageError("decoding (--out) needs --data, and --shape-id for pose interpolation")
        ds = load_dataset(args.data)
        ident = args.shape_id if args.kind == "pose" else args.a
        canonical = ds.identities[ident].canonical
        if args.kind == "pose":
            cloud = transfer(_shape_code(ck, bank, ident), code, canonical, model)
        else:
            pose = _frame_codes(ck, bank, args.pose_frame) if args.pose_frame is not None else bank.mean_pose()
            cloud = transfer(code, pose, canonical, model)
        save_cloud(args.out, cloud)
        print(f"wrote decoded interpolation -> {args.out}")
    else:
        print(json.dumps({"kind": args.kind, "t": args.t, "code": [float(v) for v in code]}))
    return 0


def cmd_segment(args) -> int:
    from .evaluate import purity, segment_parts

    ck = ckpt_io.load_checkpoint(args.ckpt)
    model, bank = ckpt_io.build_model(ck)
    ds = load_dataset(args.data)
    if not 0 <= args.frame < len(ds.frames):
        raise ValueError(f"unknown frame {args.frame}")
    fr = ds.frames[args.frame]
    s, p = _shape_code(ck, bank, fr.identity), _frame_codes(ck, bank, args.frame)
    labels = segment_parts(fr.cloud, model, s, p, args.clusters, args.seed)
    Path(args.out).write_text("\n".join(str(int(v)) for v in labels) + "\n", encoding="utf-8")
    score = purity(labels, ds.identities[fr.identity].parts)
    print(f"frame {args.frame}: {args.clusters} clusters, purity vs GT parts {score:.4f} -> {args.out}")
    return 0


def cmd_bench_knn(args) -> int:
    from .knn import bench_knn, write_bench_csv

    rows = bench_knn(args.n, args.d, args.k, args.block, args.seed, args.repeats)
    write_bench_csv(rows, args.out)
    for r in rows:
        print(f"{r['method']:8s} N={r['N']} D={r['D']} k={r['k']} block={r['block']} {r['wall_ms']:.1f} ms peak {r['peak_aux_bytes'] / 2**20:.1f} MiB")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import ALL_CASES, run_suite

    names = args.only or list(ALL_CASES)
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise UsageError(f"unknown gradcheck case(s) {unknown}")
    failed = []

    def show(res):
        ok = res.passed(args.tol)
        if not ok:
            failed.append(res.name)
        print(f"{'PASS' if ok else 'FAIL'} {res.name} instances={res.instances} max_rel_err={res.max_rel_error:.3e} redraws={res.redraws} {res.seconds:.1f}s", flush=True)

    run_suite(args.instances, args.seed, args.h, names, progress=show)
    if failed:
        return _fail("GradcheckFailed", f"{len(failed)} case(s) above tolerance {args.tol}: {','.join(failed)}", 1)
    print(f"all {len(names)} cases below {args.tol}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gnpm", description="Neural point-cloud deformation models: data, training, fitting, evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic articulated dataset")
    g.add_argument("--spec", required=True, help="JSON data spec")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train forward/backward networks and latent codes")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--supervised", action="store_true", help="supervised variant with GT correspondences")
    t.add_argument("--epochs", type=int, help="override train.epochs (0 writes the initial state)")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--log", help="loss log CSV (default <out>.log.csv)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit", help="fit latent codes to sequences with frozen weights")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--seq", required=True, help="dataset directory or manifest holding the sequences")
    f.add_argument("--out", required=True, help="codes file (.npz)")
    f.add_argument("--config", help="INI config; only the [fit] section is used")
    which = f.add_mutually_exclusive_group()
    which.add_argument("--split", default="heldout_pose", choices=["train", "heldout_pose", "heldout_identity"])
    which.add_argument("--sequence", type=int, nargs="+", help="explicit sequence ids")
    f.add_argument("--iterations", type=int)
    f.add_argument("--cold", action="store_true", help="start every frame from the mean pose code")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="EPE / Chamfer-l2 / correspondence accuracy report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--codes", help="codes from `fit`; default evaluates the training sequences")
    e.add_argument("--report", required=True, help="CSV output")
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("transfer", help="decode identity A in the pose of frame B")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True, help="dataset holding A's canonical cloud")
    tr.add_argument("--shape-id", type=int, required=True)
    tr.add_argument("--pose-frame", type=int, required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_transfer)

    it = sub.add_parser("interp", help="interpolate two pose (frame) or shape (identity) codes")
    it.add_argument("--ckpt", required=True)
    it.add_argument("--a", type=int, required=True)
    it.add_argument("--b", type=int, required=True)
    it.add_argument("--t", type=float, required=True)
    it.add_argument("--kind", choices=["pose", "shape"], default="pose")
    it.add_argument("--data", help="needed with --out")
    it.add_argument("--shape-id", type=int, help="identity to decode (pose interpolation)")
    it.add_argument("--pose-frame", type=int, help="pose to decode with (shape interpolation; default mean pose)")
    it.add_argument("--out", help="write the decoded cloud instead of printing the code")
    it.set_defaults(func=cmd_interp)

    s = sub.add_parser("segment", help="k-means part segmentation on first-layer features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--clusters", type=int, default=7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="labels, one per line")
    s.set_defaults(func=cmd_segment)

    b = sub.add_parser("bench-knn", help="naive vs blocked k-NN timing and memory")
    b.add_argument("--n", type=int, default=4096)
    b.add_argument("--d", type=int, default=3)
    b.add_argument("--k", type=int, default=10)
    b.add_argument("--block", type=int, default=256)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_knn)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-6)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--only", nargs="+", help="subset of case names")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ckpt_io.CheckpointError as exc:
        return _fail("CheckpointError", str(exc), 1)
    except (OSError, ValueError, KeyError, TypeError, IndexError, RuntimeError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc).replace("\n", " "), 1)


if __name__ == "__main__":
    sys.exit(main())
