"""Toy layer-split sweep: 5 splits x 3 seeds on the anagram task, then a mean table.

    python3 scripts/run_trend_sweep.py [--root runs/acceptance] [--epochs 30] [--jobs 1]

Results are shared with tests/test_acceptance.py through the same cache key.
"""

import argparse
import logging

from hybridsan.experiments import trend_sweep

p = argparse.ArgumentParser()
p.add_argument("--root", default="runs/acceptance")
p.add_argument("--epochs", type=int, default=30)
p.add_argument("--seeds", default="0,1,2")
p.add_argument("--jobs", type=int, default=1)
p.add_argument("--fresh", action="store_true", help="ignore a finished sweep with the same key")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows, out = trend_sweep(args.root, [int(s) for s in args.seeds.split(",")], args.epochs,
                        jobs=args.jobs, reuse=not args.fresh)
print(f"sweep dir: {out}")
print(f"{'split':<10}{'seed':>6}{'token err %':>14}  status")
for r in rows:
    print(f"{r['split']:<10}{str(r['seed']):>6}{100 * r['token_error']:>14.2f}  {r['status']}")
