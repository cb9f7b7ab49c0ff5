"""Commit to a seed, run a round, reveal, then show that single edits to the log are caught.

    python demos/audit_tamper.py
"""

import numpy as np

from chunkswarm import RoundConfig, run_experiment, verify_round_log
from chunkswarm.overlay import tamper_log

cfg = RoundConfig(n=30, m=5, K=40, seed=2024)
rep = run_experiment(cfg, attacks="none", keep_artifacts=True)
log = rep.artifacts["round_log"]
print(f"commitment published before the round: {log.seed_commit[:16]}...")
print(f"revealed log: {len(log.directives)} directives over {rep.round_slots} slots")
print("honest log:", verify_round_log(log.seed_commit, cfg.seed, log, cfg))
g = np.random.default_rng(0)
for kind in ("adjacency", "cap", "duplicate"):
    bad = tamper_log(log, cfg, kind, g)
    v = verify_round_log(log.seed_commit, cfg.seed, bad, cfg)
    print(f"{kind:>9} edit -> accept={v.accept} reason={v.reason}: {v.detail}")
print("wrong seed revealed:", verify_round_log(log.seed_commit, cfg.seed + 1, log, cfg).reason)
