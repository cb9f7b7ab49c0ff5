"""Warm-up length as the cover threshold grows, through the sweep driver.

    python demos/beta_sweep.py [seeds]
"""

import sys

import numpy as np

from chunkswarm import RoundConfig, emit_report, run_sweep

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
betas = [0.05, 0.10, 0.15, 0.20, 0.50]
reps = run_sweep(RoundConfig(n=100, seed=1), "beta", betas, seeds=seeds, attacks="none",
                 bittorrent=False)
for i, b in enumerate(betas):
    chunk = reps[i * seeds:(i + 1) * seeds]
    print(f"beta={b:.2f}: warm-up {np.mean([r.warmup_slots for r in chunk]):7.1f} slots, "
          f"emergency releases {np.mean([r.emergency_releases for r in chunk]):7.1f}")
emit_report(reps, "out/beta_sweep", axis="beta")
print("wrote out/beta_sweep")
