"""Attention maps, diagonality and MHA~identity residuals of the toy 4SA+0FF models.

    python3 scripts/attention_diagnostics.py [--root runs/acceptance] [--grid 32]

Needs a finished trend sweep (scripts/run_trend_sweep.py). Writes heatmaps
(PGM + CSV) and per-layer tables next to each model.
"""

import argparse

import numpy as np

from hybridsan import cli
from hybridsan.experiments import analyze, load_run, trend_sweep, validation_set

p = argparse.ArgumentParser()
p.add_argument("--root", default="runs/acceptance")
p.add_argument("--epochs", type=int, default=30)
p.add_argument("--grid", type=int, default=32)
args = p.parse_args()

_, out = trend_sweep(args.root, epochs=args.epochs)
for seed in (0, 1, 2):
    run = out / "cells" / f"4sa+0ff-seed{seed}"
    model, cfg = load_run(run)
    res = analyze(model, validation_set(cfg), grid=args.grid)
    print(f"seed {seed}")
    print(f"  {'layer':<6}{'D0':>7}{'D1':>7}{'D2':>7}{'D4':>7}{'|offset|':>10}{'residual':>10}")
    for li in range(len(res.sa_layers)):
        d = [res.report.layer_mean(li, w) for w in res.report.bandwidths]
        off = np.mean(res.report.offsets[li])
        print(f"  {li + 1:<6}" + "".join(f"{v:>7.3f}" for v in d) + f"{off:>10.2f}{res.residuals[li]:>10.3f}")
    # same artifacts as the analyze verb
    cli.main(["analyze", str(run / "final.ckpt"), "--grid", str(args.grid)])
