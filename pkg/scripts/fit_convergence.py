"""Test-time fitting of held-out pose sequences: warm versus cold starts.

    python3 scripts/fit_convergence.py runs/desk/cycle.ckpt [--iterations 200]
"""

import argparse

import numpy as np

from gnpm import presets
from gnpm.checkpoint import build_model, load_checkpoint
from gnpm.data import generate
from gnpm.optim import fit_sequence


def first_below(trace, level):
    hits = np.flatnonzero(np.asarray(trace) <= level)
    return int(hits[0]) if hits.size else len(trace)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("ckpt")
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--sequences", type=int, default=1, help="how many held-out sequences to fit")
    args = ap.parse_args()

    model, bank = build_model(load_checkpoint(args.ckpt))
    ds = generate(presets.data_spec())
    cfg = presets.fit_config()
    cfg.iterations = args.iterations
    for seq in ds.sequences_in("heldout_pose")[: args.sequences]:
        clouds = [ds.frames[f].cloud for f in seq.frames]
        for warm in (True, False):
            res = fit_sequence(model, clouds, bank.mean_shape(), bank.mean_pose(), cfg, warm_start=warm)
            base = np.asarray(res.baseline)
            final = np.array([h[-1] for h in res.history])
            reach = [first_below(h, 0.5 * b) for h, b in zip(res.history[1:], base[1:])]
            print(
                f"sequence {seq.id} {'warm' if warm else 'cold'}: final/mean-code L_loop {np.mean(final / base):.3f}, "
                f"iterations to half (frames 1..) {np.mean(reach):.1f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
