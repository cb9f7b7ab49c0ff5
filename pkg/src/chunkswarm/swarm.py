"""Post-warm-up swarming (local rarest-first) and deadline FedAvg."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass

import numba
import numpy as np

from . import rng
from .engine import PHASE_BT, SimState, step
from .overlay import DIRECTIVE_DTYPE
from .schedulers import _serving, _workspace

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


@numba.njit(cache=True)
def _bt_kernel(seed, res_up, res_down, active, claimed, NH, miss_list, miss_len, adj_ptr, adj_idx,
               tau, cand, ncand, out_s, out_r, out_c):
    np.random.seed(seed)
    n = len(res_up)
    Lmax = cand.shape[1]
    maxh = 0
    for w in range(n):
        d = adj_ptr[w + 1] - adj_ptr[w]
        if d > maxh:
            maxh = d
    hist = np.zeros(maxh + 2, np.int64)
    start = np.zeros(maxh + 2, np.int64)
    fill = np.zeros(maxh + 2, np.int64)
    for w in range(n):
        ncand[w] = 0
        if not active[w] or res_down[w] <= 0 or miss_len[w] == 0:
            continue
        hist[:] = 0
        k = 0
        # branch-free compaction; the list stays sorted so row access is sequential
        for i in range(miss_len[w]):
            c = miss_list[w, i]
            miss_list[w, k] = c
            keep = 1 - claimed[w, c]
            k += keep
            hist[min(NH[w, c], maxh) * keep] += 1
        miss_len[w] = k
        if k == 0:
            continue
        L = min(2 * res_down[w] + 4, Lmax)
        cum = 0
        hb = maxh + 1
        take_last = 0
        for h in range(1, maxh + 1):
            if cum + hist[h] >= L:
                hb = h
                take_last = L - cum
                break
            cum += hist[h]
        tot = 0
        for h in range(1, maxh + 1):
            start[h] = tot
            fill[h] = 0
            if h < hb:
                tot += hist[h]
            elif h == hb:
                tot += take_last
        r = np.random.randint(0, k)
        for t in range(k):
            i = r + t
            if i >= k:
                i -= k
            c = miss_list[w, i]
            h = NH[w, c]
            if h <= 0:
                continue
            h = min(h, maxh)
            if h > hb:
                continue
            if h == hb:
                if fill[h] >= take_last:
                    continue
            cand[w, start[h] + fill[h]] = c
            fill[h] += 1
        ncand[w] = tot
    order = np.zeros(n, np.int64)
    nr = 0
    for w in range(n):
        if ncand[w] > 0:
            order[nr] = w
            nr += 1
    order = order[:nr]
    ptr = np.zeros(n, np.int64)
    ru = res_up.copy()
    rd = res_down.copy()
    nrecv = np.zeros(n, np.int64)
    recv_of = np.full((n, max(tau, 1)), -1, np.int64)
    k = 0
    while True:
        progress = False
        np.random.shuffle(order)
        for oi in range(nr):
            w = order[oi]
            while rd[w] > 0 and ptr[w] < ncand[w]:
                c = cand[w, ptr[w]]
                ptr[w] += 1
                best = -1
                best_r = -1
                best_serving = False
                for p in range(adj_ptr[w], adj_ptr[w + 1]):
                    u = adj_idx[p]
                    if not active[u] or claimed[u, c] == 0 or ru[u] <= 0:
                        continue
                    serving = _serving(u, w, recv_of, nrecv)
                    if not serving and nrecv[u] >= tau:
                        continue
                    if (serving and not best_serving) or (serving == best_serving and ru[u] > best_r):
                        best = u
                        best_r = ru[u]
                        best_serving = serving
                if best < 0:
                    continue
                if not best_serving:
                    recv_of[best, nrecv[best]] = w
                    nrecv[best] += 1
                out_s[k] = best
                out_r[k] = w
                out_c[k] = c
                k += 1
                ru[best] -= 1
                rd[w] -= 1
                progress = True
                break
        if not progress:
            break
    return k


def bt_step(state: SimState, seed: int) -> np.ndarray:
    """One slot of local rarest-first swarming.

    Each receiver ranks its missing chunks by how many neighbours hold them
    (ties in seeded random order) and, in randomly ordered passes, takes its
    next rarest chunk from a feasible holder, preferring a holder already
    serving it, else the one with most residual uplink.  Senders serve at most
    ``tau`` receivers.  Owner and relay copies are not distinguished.
    """
    n = state.n
    Lmax = int(2 * state.down.max() + 4)
    cand = _workspace(state, "bt_cand", (n, Lmax), np.int32)
    ncand = np.zeros(n, np.int64)
    cap = int(state.res_up.sum()) + 1
    out_s = np.zeros(cap, np.int64)
    out_r = np.zeros(cap, np.int64)
    out_c = np.zeros(cap, np.int64)
    kseed = rng.derive_seed(seed, rng.SWARM, state.slot) % (2**32 - 1)
    k = _bt_kernel(kseed, state.res_up.astype(np.int64), state.res_down.astype(np.int64),
                   state.active, state.claimed, state.NH, state.miss_list, state.miss_len,
                   state.adj_ptr, state.adj_idx, state.config.tau, cand, ncand, out_s, out_r, out_c)
    d = np.zeros(k, dtype=DIRECTIVE_DTYPE)
    d["stage"] = state.slot
    d["sender"] = out_s[:k]
    d["receiver"] = out_r[:k]
    d["chunk"] = out_c[:k]
    d["flags"] = 1
    return d


def run_bittorrent(state: SimState, s_max: int | None = None) -> int:
    """Swarm from ``state.slot`` until nothing more can move or the deadline; returns end slot."""
    from .warmup import _apply_faults

    s_max = state.config.s_max if s_max is None else s_max
    seed = state.config.seed
    s = state.slot
    carry = np.zeros(0, DIRECTIVE_DTYPE)
    while s < s_max:
        state.new_slot(s)
        state.lagged_until = np.zeros(state.n, dtype=np.int64)
        _apply_faults(state, s)
        if len(carry):
            keep = state.claimed[carry["sender"], carry["chunk"]].astype(bool) & \
                (state.held[carry["receiver"], carry["chunk"]] == 0)
            carry = carry[keep]
            _, carry, _ = step(state, carry, PHASE_BT)
        plan = bt_step(state, seed)
        if len(plan) == 0 and len(carry) == 0:
            break
        _, deferred, _ = step(state, plan, PHASE_BT)
        carry = np.concatenate([carry, deferred]) if len(deferred) else carry
        state.sends_per_slot.append(int(state.up.sum() - state.res_up.sum()))
        s += 1
    state.slot = s
    return s


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class UpdateVector:
    owner: int
    weight: float
    values: np.ndarray

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("update weight must be positive")


@dataclass(frozen=True)
class ReconstructableSet:
    node: int
    members: tuple[int, ...]


def synthetic_updates(n: int, length: int, seed: int) -> list[UpdateVector]:
    """Seeded stand-in updates: Gaussian values and integer sample-count weights."""
    g = rng.stream(seed, rng.UPDATES)
    vals = g.normal(size=(n, length))
    weights = g.integers(1, 101, size=n)
    return [UpdateVector(u, float(weights[u]), vals[u]) for u in range(n)]


def reconstructable_set(v: int, held: np.ndarray, offsets) -> ReconstructableSet:
    """Owners whose every chunk ``v`` holds."""
    row = np.asarray(held[v], dtype=bool)
    offsets = np.asarray(offsets)
    full = np.logical_and.reduceat(row, offsets[:-1]) if len(row) else np.zeros(0, bool)
    members = tuple(int(u) for u in np.flatnonzero(full))
    if not members:
        raise AggregationError(f"node {v} cannot reconstruct any update")
    return ReconstructableSet(v, members)


def fedavg(updates, members) -> np.ndarray:
    """Weighted mean over ``members`` summed in ascending owner order."""
    by_owner = {u.owner: u for u in updates}
    members = sorted(members)
    if not members:
        raise AggregationError("empty reconstructable set")
    total = 0.0
    for u in members:
        total += by_owner[u].weight
    if total <= 0:
        raise AggregationError("zero total weight")
    acc = np.zeros_like(by_owner[members[0]].values, dtype=np.float64)
    for u in members:
        acc = acc + (by_owner[u].weight / total) * by_owner[u].values
    return acc


def checksum(vec: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype=np.float64).tobytes()).hexdigest()[:16]


def aggregate_all(state: SimState, updates) -> dict:
    """Per active node: reconstructable members and the FedAvg aggregate."""
    out = {}
    for v in np.flatnonzero(state.active):
        try:
            rs = reconstructable_set(int(v), state.held, state.universe.offsets)
        except AggregationError:
            out[int(v)] = (tuple(), None)
            continue
        out[int(v)] = (rs.members, fedavg(updates, rs.members))
    return out


def write_aggregation_csv(aggregates: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "reconstructable_count", "aggregate_checksum"])
        for v in sorted(aggregates):
            members, agg = aggregates[v]
            w.writerow([v, len(members), checksum(agg) if agg is not None else ""])
