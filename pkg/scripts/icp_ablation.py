"""Train the desk-scale cycle model with and without the ICP anchor and compare.

Prints, every ``--every`` epochs, the cycle loss, keyframe EPE against the
zero-deformation baseline and the Chamfer-l2 of the canonical prediction to
the GT canonical cloud.

    python3 scripts/icp_ablation.py --epochs 300 --lambda-icp 10 1 --mode chamfer
"""

import argparse
import time

import numpy as np

from gnpm import presets
from gnpm.checkpoint import save_checkpoint
from gnpm.data import generate
from gnpm.evaluate import chamfer_l2, epe, track_keyframe
from gnpm.optim import Trainer


def evaluate(tr):
    ds = tr.dataset
    err, base, cd = [], [], []
    for seq in ds.sequences_in("train"):
        key = ds.frames[seq.frames[0]].cloud
        s, pk = tr.codes_for_frame(seq.frames[0])
        for f in seq.frames[1:]:
            p = tr.codes_for_frame(f)[1]
            gt = ds.frames[f].cloud - key
            err.append(epe(track_keyframe(tr.model, key, s, pk, p) - key, gt))
            base.append(epe(np.zeros_like(gt), gt))
        for f in seq.frames[::5]:
            s, p = tr.codes_for_frame(f)
            y = tr.model.forward_deform(ds.frames[f].cloud, s, p)[1].values
            cd.append(chamfer_l2(y, ds.identities[seq.identity].canonical))
    return np.mean(err), np.mean(base), np.mean(cd)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--lambda-icp", type=float, nargs=2, default=(10.0, 1.0), metavar=("INIT", "MIN"))
    ap.add_argument("--mode", default="chamfer", choices=["match", "score", "chamfer"])
    ap.add_argument("--no-icp", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ckpt", help="save the final state here")
    args = ap.parse_args()

    cfg = presets.cycle_config(icp=not args.no_icp, epochs=args.epochs, seed=args.seed)
    cfg.weights.icp_mode = args.mode
    if not args.no_icp:
        cfg.weights.icp_init, cfg.weights.icp_min = args.lambda_icp
    tr = Trainer(generate(presets.data_spec()), cfg)
    t0 = time.time()
    for ep in range(args.epochs):
        tr.train_epoch()
        if ep % args.every == 0 or ep == args.epochs - 1:
            e, b, c = evaluate(tr)
            print(
                f"epoch {ep:4d} loop {tr.epoch_mean('loop', ep):.5f} icp {tr.epoch_mean('icp', ep):.5f} "
                f"EPE {e:.4f} / {b:.4f} ({e / b:.3f}) canonical C-l2 {c:.5f} [{time.time() - t0:.0f}s]",
                flush=True,
            )
    if args.ckpt:
        save_checkpoint(args.ckpt, tr)


if __name__ == "__main__":
    main()
