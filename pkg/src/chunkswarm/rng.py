"""Seeded random streams.

Every random decision in a round is drawn from a named stream derived from the
round seed.  Streams use NumPy's ``Philox`` (4x64 counter-based) bit generator
keyed through ``SeedSequence``; both are specified by NumPy independently of the
platform, so a (seed, stream) pair reproduces bit-identical draws everywhere.
"""

from __future__ import annotations

import numpy as np

# Stream identifiers.  Append only: changing a value changes every run.
OVERLAY = 1
CAPACITIES = 2
SPRAY = 3
LAGS = 4
SCHEDULE = 5
ENGINE = 6
SWARM = 7
UPDATES = 8
PSEUDONYMS = 9
FAULTS = 10
ATTACKERS = 11


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, stream_id, *extra)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(base_seed: int, *path: int) -> int:
    """Derive a 63-bit child seed, used for sweep points and replicates."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
