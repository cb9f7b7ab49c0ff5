"""Attribution success of the three observation-only attacks under each defence preset.

none: no cover threshold, no spray, no lags.  tl: lags only.  pr: spray only.
both: everything on.  The cover threshold (beta) and owner throttling stay on
in tl, pr and both.

    python demos/defence_ablation.py [seeds]
"""

import sys

import numpy as np

from chunkswarm import ATTACKS, RoundConfig, run_experiment, with_defenses
from chunkswarm.harness import replicate_seeds

seeds = replicate_seeds(1, int(sys.argv[1]) if len(sys.argv) > 1 else 3)
print(f"n=100, m=10, {len(seeds)} seeds, warm-up observations only")
print(f"{'preset':>7} " + " ".join(f"{a:>14}" for a in ATTACKS) + "  warm-up slots")
for preset in ("none", "tl", "pr", "both"):
    rows, slots = [], []
    for s in seeds:
        rep = run_experiment(with_defenses(RoundConfig(n=100, seed=s), preset), bittorrent=False)
        rows.append([rep.asr_table[a]["max"] for a in ATTACKS])
        slots.append(rep.warmup_slots)
    m = np.mean(rows, axis=0)
    print(f"{preset:>7} " + " ".join(f"{100 * v:13.2f}%" for v in m) + f"  {np.mean(slots):.0f}")
