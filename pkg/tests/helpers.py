"""Shared instance generators for the test suite."""

import numpy as np

from chunkswarm.overlay import Overlay
from chunkswarm.warmup import ViewSnapshot

SMALL = dict(n=20, m=4, K=30)


def random_view(g, max_nodes=6, max_chunks=8, max_budget=3):
    """Random stage snapshot small enough for exhaustive search."""
    n = int(g.integers(2, max_nodes + 1))
    C = int(g.integers(n, max(n, max_chunks) + 1))
    owner_of = np.sort(np.concatenate([np.arange(n), g.integers(0, n, C - n)])).astype(np.int32)
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if g.random() < 0.6]
    ptr, idx = Overlay.from_edges(n, edges).csr()
    claimed = (g.random((n, C)) < 0.4).astype(np.uint8)
    claimed[owner_of, np.arange(C)] = 1
    elig_owner = np.full((n, 2), -1, dtype=np.int64)
    elig_n = np.zeros(n, dtype=np.int64)
    for u in range(n):
        own = np.flatnonzero(owner_of == u)
        k = int(g.integers(0, min(2, len(own)) + 1))
        elig_owner[u, :k] = g.choice(own, k, replace=False)
        elig_n[u] = k
    return ViewSnapshot(
        stage=0, demand=g.integers(0, max_budget + 1, n), res_up=g.integers(0, max_budget + 1, n),
        res_down=g.integers(0, max_budget + 1, n), send_ok=g.random(n) < 0.9,
        active=np.ones(n, dtype=bool), claimed=claimed, elig_owner=elig_owner, elig_n=elig_n,
        emergency=g.random(n) < 0.2, credit=g.random(n), ratio=g.random(n) * 0.5,
        paced=bool(g.random() < 0.7), owner_of=owner_of, adj_ptr=ptr, adj_idx=idx.astype(np.int64),
    )
