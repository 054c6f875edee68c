"""Forward-time scaling of one SA layer against one FF layer, single-threaded.

    python3 scripts/bench_scaling.py [--d-att 256] [--d-ff 2048] [--heads 4]

Besides the full layers it times the attention-score core (Q K^T, softmax,
probabilities @ V) on its own, which isolates the quadratic term that the
n-independent projections and the FF block hide at moderate n.
"""

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from hybridsan.analysis import fit_loglog_slope, time_scaling_bench

p = argparse.ArgumentParser()
p.add_argument("--lengths", default="64,128,256,512,1024")
p.add_argument("--repeats", type=int, default=7)
p.add_argument("--d-att", type=int, default=256)
p.add_argument("--d-ff", type=int, default=2048)
p.add_argument("--heads", type=int, default=4)
args = p.parse_args()
lengths = [int(n) for n in args.lengths.split(",")]

reports = [time_scaling_bench(k, lengths, args.repeats, args.d_att, args.d_ff, args.heads) for k in ("SA", "FF")]
print(f"{'n':>6}" + "".join(f"{r.kind + ' ms':>12}" for r in reports))
for i, n in enumerate(lengths):
    print(f"{n:>6}" + "".join(f"{1e3 * r.times[i]:>12.3f}" for r in reports))
for r in reports:
    print(f"{r.kind}: slope {r.slope:.3f}, largest doubling x{r.doubling_ratio():.2f}, params {r.params:,}")


def core(q, k, v):
    s = q @ k.swapaxes(-1, -2) / np.sqrt(q.shape[-1])
    s = np.exp(s - s.max(-1, keepdims=True))
    return (s / s.sum(-1, keepdims=True)) @ v


rng = np.random.default_rng(0)
times = []
with threadpool_limits(limits=1):
    for n in lengths:
        q, k, v = (rng.normal(size=(args.heads, n, args.d_att)) for _ in range(3))
        core(q, k, v)
        samples = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            core(q, k, v)
            samples.append(time.perf_counter() - t0)
        times.append(statistics.median(samples))
print(f"attention core only: slope {fit_loglog_slope(lengths, times):.3f}, "
      f"largest doubling x{times[-1] / times[-2]:.2f}")
