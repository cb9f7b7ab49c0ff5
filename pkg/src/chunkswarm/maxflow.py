"""Stage-wise max-flow upper bound on warm-up throughput.

One stage is a flow network: the source feeds each uploader ``v`` with its
residual uplink, uploaders feed request nodes ``(w, c)`` for chunks they may
serve to neighbour ``w``, request nodes feed a per-receiver collector, and the
collector drains to the sink with the receiver's demand.  Each request node has
unit capacity, so one receiver never gets the same chunk twice.

Owner chunks pass through a per-uploader gate node whose capacity is the
uploader's owner-send allowance for the stage, so gating, throttling and
pacing carry over to the bound.

Request nodes of one receiver that share the same set of eligible holders are
interchangeable.  The compressed form merges them into one node with capacity
equal to the group size; because every holder in a group can serve every chunk
of the group, the maximum-flow value is unchanged and any integral flow
decodes into per-chunk transfers.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numba
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .overlay import DIRECTIVE_DTYPE, EMERGENCY, SCHEDULED

SOURCE = 0
SINK = 1

# arc kinds
ARC_SUPPLY = 0   # source -> uploader(v)
ARC_GATE = 1     # uploader(v) -> gate(v)
ARC_RELAY = 2    # uploader(v) -> request group
ARC_OWNER = 3    # gate(v) -> request group
ARC_COLLECT = 4  # request group -> collector(w)
ARC_DRAIN = 5    # collector(w) -> sink

MAX_DEGREE = 57


@dataclass
class FlowNetwork:
    """Integer-capacity s-t network for one stage.

    Node layout: source 0, sink 1, uploader ``v`` at ``2 + v``, gate ``v`` at
    ``2 + n + v``, collector ``w`` at ``2 + 2n + w``, request group ``g`` at
    ``2 + 3n + g``.  Group ``g`` belongs to receiver ``group_receiver[g]`` and
    holds chunks ``group_chunks[group_ptr[g]:group_ptr[g + 1]]``.
    """

    n: int
    stage: int
    tail: np.ndarray
    head: np.ndarray
    cap: np.ndarray
    kind: np.ndarray
    sender: np.ndarray
    group: np.ndarray
    group_receiver: np.ndarray
    group_ptr: np.ndarray
    group_chunks: np.ndarray
    emergency: np.ndarray

    @property
    def num_nodes(self) -> int:
        return 2 + 3 * self.n + len(self.group_receiver)

    @property
    def num_groups(self) -> int:
        return len(self.group_receiver)

    def group_node(self, g):
        return 2 + 3 * self.n + np.asarray(g)

    def arcs_of(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.kind == kind)


# ---------------------------------------------------------------------------
# view access (works for a live StageView or a frozen ViewSnapshot)


def _view_arrays(view):
    st = getattr(view, "state", None)
    if st is not None:
        return st.claimed, st.active, st.universe.owner_of, st.adj_ptr, st.adj_idx
    return view.claimed, view.active, view.owner_of, view.adj_ptr, view.adj_idx


def owner_gates(view) -> np.ndarray:
    """Per-node upper bound on owner sends this stage."""
    res_up = np.asarray(view.res_up, dtype=np.int64)
    paced = np.floor(np.asarray(view.credit) + np.asarray(view.ratio) * res_up + 1e-9).astype(np.int64)
    gate = np.where(np.asarray(view.emergency) | (not view.paced), res_up, np.minimum(res_up, paced))
    return np.where(np.asarray(view.elig_n) > 0, gate, 0)


# ---------------------------------------------------------------------------
# construction


@numba.njit(cache=True)
def _group_kernel(claimed, active, send_ok, owner_of, adj_ptr, adj_idx, elig_owner, elig_n,
                  demand, merge, held_ptr, held_idx, out_recv, out_gate, out_ptr, out_chunks,
                  relay_g, relay_u, relay_limit):
    n, C = claimed.shape
    key = np.zeros(C, np.int64)
    touched = np.zeros(C, np.int64)
    seen = np.zeros(C, np.uint8)
    ng = 0
    nch = 0
    nrel = 0
    out_ptr[0] = 0
    for w in range(n):
        if demand[w] <= 0 or not active[w]:
            continue
        lo = adj_ptr[w]
        hi = adj_ptr[w + 1]
        nt = 0
        for i in range(hi - lo):
            u = adj_idx[lo + i]
            if not send_ok[u]:
                continue
            for t in range(held_ptr[u], held_ptr[u + 1]):
                c = held_idx[t]
                if claimed[w, c]:
                    continue
                if owner_of[c] == u:
                    ok = False
                    for j in range(elig_n[u]):
                        if elig_owner[u, j] == c:
                            ok = True
                    if not ok:
                        continue
                    # low 6 bits: 1 + position of the gated owner
                    key[c] |= i + 1
                else:
                    key[c] |= np.int64(1) << np.int64(i + 6)
                if not seen[c]:
                    seen[c] = 1
                    touched[nt] = c
                    nt += 1
        if nt == 0:
            continue
        tc = touched[:nt].copy()
        if relay_limit > 0:
            # keep the lowest-position relays only; every kept holder still serves the whole group
            for t in range(nt):
                c = tc[t]
                m = key[c] >> 6
                kept = np.int64(0)
                got = 0
                i = 0
                while m and got < relay_limit:
                    if m & 1:
                        kept |= np.int64(1) << np.int64(i)
                        got += 1
                    m >>= 1
                    i += 1
                key[c] = (kept << 6) | (key[c] & 63)
        if merge:
            kk = np.empty(nt, np.int64)
            for t in range(nt):
                kk[t] = key[tc[t]]
            order = np.argsort(kk)
        else:
            tc.sort()
            order = np.arange(nt)
        prev = -1
        for t in range(nt):
            c = tc[order[t]]
            k = key[c]
            if not merge or k != prev:
                if t > 0:
                    ng += 1
                    out_ptr[ng] = nch
                out_recv[ng] = w
                g = (k & 63) - 1
                out_gate[ng] = adj_idx[lo + g] if g >= 0 else -1
                m = k >> 6
                i = 0
                emitted = 0
                while m and (relay_limit <= 0 or emitted < relay_limit):
                    if m & 1:
                        relay_g[nrel] = ng
                        relay_u[nrel] = adj_idx[lo + i]
                        nrel += 1
                        emitted += 1
                    m >>= 1
                    i += 1
                prev = k
            out_chunks[nch] = c
            nch += 1
        ng += 1
        out_ptr[ng] = nch
        for t in range(nt):
            c = touched[t]
            key[c] = 0
            seen[c] = 0
    return ng, nch, nrel


def build_stage_network(view, compress: bool = True, demand_cap: bool = True,
                        relay_limit: int = 0) -> FlowNetwork:
    """Flow network of one warm-up stage.

    Collector-to-sink capacity is the stage's request demand (``demand_cap``)
    or the raw residual downlink.  ``compress=False`` keeps one request node
    per ``(receiver, chunk)``.  A positive ``relay_limit`` keeps only that many
    relay arcs per request node, which yields a subnetwork whose flow value is
    a lower bound on the full one.
    """
    claimed, active, owner_of, adj_ptr, adj_idx = _view_arrays(view)
    n, C = claimed.shape
    send_ok = np.asarray(view.send_ok, dtype=bool) & np.asarray(active, dtype=bool)
    res_up = np.asarray(view.res_up, dtype=np.int64)
    cap_w = np.asarray(view.demand if demand_cap else view.res_down, dtype=np.int64)
    deg = np.diff(adj_ptr)
    recv = np.flatnonzero((cap_w > 0) & active)
    if len(recv) and deg[recv].max() > MAX_DEGREE:
        raise ValueError(f"receiver degree above {MAX_DEGREE} is not supported")

    rows, cols = np.nonzero(claimed[send_ok & (res_up > 0)])
    senders = np.flatnonzero(send_ok & (res_up > 0))
    held_counts = np.bincount(rows, minlength=len(senders))
    held_ptr = np.zeros(n + 1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    counts[senders] = held_counts
    held_ptr[1:] = np.cumsum(counts)
    held_idx = cols.astype(np.int64)
    ok_mask = np.zeros(n, dtype=bool)
    ok_mask[senders] = True

    nbr_held = np.array([counts[adj_idx[adj_ptr[w]:adj_ptr[w + 1]]].sum() for w in range(n)],
                        dtype=np.int64)
    room = int(np.minimum(nbr_held[recv], C).sum()) if len(recv) else 0
    out_recv = np.zeros(room + 1, np.int64)
    out_gate = np.zeros(room + 1, np.int64)
    out_ptr = np.zeros(room + 2, np.int64)
    out_chunks = np.zeros(room + 1, np.int64)
    relay_g = np.zeros(int(nbr_held[recv].sum()) + 1 if len(recv) else 1, np.int64)
    relay_u = np.zeros_like(relay_g)
    ng, nch, nrel = _group_kernel(claimed, np.asarray(active, dtype=bool), ok_mask, owner_of,
                                  adj_ptr, adj_idx, np.asarray(view.elig_owner, dtype=np.int64),
                                  np.asarray(view.elig_n, dtype=np.int64), cap_w, compress,
                                  held_ptr, held_idx, out_recv, out_gate, out_ptr, out_chunks,
                                  relay_g, relay_u, relay_limit)
    g_recv = out_recv[:ng]
    g_gate = out_gate[:ng]
    g_ptr = out_ptr[:ng + 1]
    g_size = np.diff(g_ptr)
    gi = relay_g[:nrel]
    relay_snd = relay_u[:nrel]

    up_node = 2 + np.arange(n)
    gate_node = 2 + n + np.arange(n)
    coll_node = 2 + 2 * n + np.arange(n)
    grp_node = 2 + 3 * n + np.arange(ng)
    tails, heads, caps, kinds, snd, grp = [], [], [], [], [], []

    def add(t, h, c, k, s, g):
        tails.append(np.asarray(t, np.int64))
        heads.append(np.asarray(h, np.int64))
        caps.append(np.asarray(c, np.int64))
        kinds.append(np.full(len(tails[-1]), k, np.int64))
        snd.append(np.asarray(s, np.int64))
        grp.append(np.asarray(g, np.int64))

    up_nodes = np.flatnonzero(ok_mask)
    add(np.zeros(len(up_nodes)), up_node[up_nodes], res_up[up_nodes], ARC_SUPPLY, up_nodes,
        np.full(len(up_nodes), -1))
    gates = owner_gates(view)
    add(up_node[relay_snd], grp_node[gi], g_size[gi], ARC_RELAY, relay_snd, gi)
    gg = np.flatnonzero(g_gate >= 0)
    owner_snd = g_gate[gg]
    gated = np.unique(owner_snd)
    add(up_node[gated], gate_node[gated], gates[gated], ARC_GATE, gated, np.full(len(gated), -1))
    add(gate_node[owner_snd], grp_node[gg], g_size[gg], ARC_OWNER, owner_snd, gg)
    add(grp_node, coll_node[g_recv], np.minimum(g_size, cap_w[g_recv]), ARC_COLLECT,
        np.full(ng, -1), np.arange(ng))
    add(coll_node[recv], np.ones(len(recv)), cap_w[recv], ARC_DRAIN, np.full(len(recv), -1),
        np.full(len(recv), -1))
    return FlowNetwork(
        n=n, stage=int(view.stage), tail=np.concatenate(tails), head=np.concatenate(heads),
        cap=np.concatenate(caps), kind=np.concatenate(kinds), sender=np.concatenate(snd),
        group=np.concatenate(grp), group_receiver=g_recv, group_ptr=g_ptr,
        group_chunks=out_chunks[:nch], emergency=np.asarray(view.emergency, dtype=bool).copy(),
    )


# ---------------------------------------------------------------------------
# solving and decoding


def max_flow(net: FlowNetwork, with_flow: bool = True) -> tuple[int, np.ndarray | None]:
    """Maximum integral s-t flow; returns the value and the per-arc flow."""
    if len(net.tail) == 0 or net.cap.sum() == 0:
        return 0, np.zeros(len(net.tail), dtype=np.int64)
    N = net.num_nodes
    keep = np.flatnonzero(net.cap > 0)
    A = csr_matrix((net.cap[keep].astype(np.int32), (net.tail[keep], net.head[keep])), shape=(N, N))
    res = maximum_flow(A, SOURCE, SINK, method="dinic")
    if not with_flow:
        return int(res.flow_value), None
    F = res.flow.tocsr()
    F.sort_indices()
    flow = np.zeros(len(net.tail), dtype=np.int64)
    flow[keep] = _csr_lookup(F.indptr, F.indices, F.data, net.tail[keep], net.head[keep])
    return int(res.flow_value), flow


@numba.njit(cache=True)
def _csr_lookup(indptr, indices, data, rows, cols):
    out = np.zeros(len(rows), np.int64)
    for i in range(len(rows)):
        lo = indptr[rows[i]]
        hi = indptr[rows[i] + 1]
        j = lo + np.searchsorted(indices[lo:hi], cols[i])
        if j < hi and indices[j] == cols[i]:
            out[i] = data[j]
    return out


def decode_schedule(net: FlowNetwork, flow) -> np.ndarray:
    """Directives realising an integral flow, one per unit into a request group."""
    flow = np.asarray(flow)
    if not np.issubdtype(flow.dtype, np.integer):
        if not np.all(flow == np.round(flow)):
            raise ValueError("flow is not integral")
        flow = flow.astype(np.int64)
    into = np.flatnonzero(((net.kind == ARC_RELAY) | (net.kind == ARC_OWNER)) & (flow > 0))
    order = into[np.lexsort((net.sender[into], net.group[into]))]
    out = np.zeros(int(flow[into].sum()), dtype=DIRECTIVE_DTYPE)
    k = 0
    nxt = net.group_ptr[:-1].copy()
    for a in order:
        g = net.group[a]
        f = int(flow[a])
        lo = nxt[g]
        if lo + f > net.group_ptr[g + 1]:
            raise ValueError("flow exceeds request group size")
        u = net.sender[a]
        chunks = net.group_chunks[lo:lo + f]
        nxt[g] = lo + f
        out["stage"][k:k + f] = net.stage
        out["sender"][k:k + f] = u
        out["receiver"][k:k + f] = net.group_receiver[g]
        out["chunk"][k:k + f] = chunks
        flag = SCHEDULED
        if net.kind[a] == ARC_OWNER and net.emergency[u]:
            flag |= EMERGENCY
        out["flags"][k:k + f] = flag
        k += f
    return out


def trivial_cap(net: FlowNetwork) -> int:
    """Smaller of the source-side and sink-side cut capacities."""
    return int(min(net.cap[net.kind == ARC_SUPPLY].sum(), net.cap[net.kind == ARC_DRAIN].sum()))


def stage_bound(view, demand_cap: bool = True, relay_limit: int = 2) -> int:
    """Max-flow value of one stage.

    A sparse subnetwork is solved first; its flow is feasible in the full
    network, so when it already saturates a trivial cut it is the maximum.
    Otherwise the full network is solved.
    """
    if relay_limit > 0:
        sub = build_stage_network(view, demand_cap=demand_cap, relay_limit=relay_limit)
        value, _ = max_flow(sub, with_flow=False)
        if value == trivial_cap(sub):
            return value
    value, _ = max_flow(build_stage_network(view, demand_cap=demand_cap), with_flow=False)
    return value


# ---------------------------------------------------------------------------
# exhaustive oracle (small instances only)


def feasible_transfers(view) -> list[tuple[int, int, int]]:
    """All ``(sender, receiver, chunk)`` triples a stage may schedule, ignoring budgets."""
    claimed, active, owner_of, adj_ptr, adj_idx = _view_arrays(view)
    n = claimed.shape[0]
    out = []
    for w in range(n):
        if not active[w] or view.demand[w] <= 0:
            continue
        for u in adj_idx[adj_ptr[w]:adj_ptr[w + 1]]:
            u = int(u)
            if not (active[u] and view.send_ok[u]):
                continue
            for c in np.flatnonzero(claimed[u]):
                c = int(c)
                if claimed[w, c]:
                    continue
                if owner_of[c] == u and c not in view.elig_owner[u, :view.elig_n[u]]:
                    continue
                out.append((u, w, c))
    return out


def brute_force_optimum(view) -> int:
    """Largest budget-feasible set of transfers, by exhaustive branch and bound."""
    claimed, _, owner_of, _, _ = _view_arrays(view)
    triples = feasible_transfers(view)
    items = sorted({(w, c) for _, w, c in triples})
    holders = {it: [u for u, w, c in triples if (w, c) == it] for it in items}
    up = np.asarray(view.res_up, dtype=np.int64).copy()
    down = np.asarray(view.demand, dtype=np.int64).copy()
    gate = owner_gates(view).copy()
    best = [0]

    def rest_bound(i, got):
        return got + min(len(items) - i, int(up.sum()), int(down.sum()))

    def go(i, got):
        if got > best[0]:
            best[0] = got
        if i == len(items) or rest_bound(i, got) <= best[0]:
            return
        w, c = items[i]
        if down[w] > 0:
            for u in holders[(w, c)]:
                own = owner_of[c] == u
                if up[u] <= 0 or (own and gate[u] <= 0):
                    continue
                up[u] -= 1
                down[w] -= 1
                gate[u] -= own
                go(i + 1, got + 1)
                up[u] += 1
                down[w] += 1
                gate[u] += own
        go(i + 1, got)

    go(0, 0)
    return best[0]


def brute_force_subsets(view) -> int:
    """Literal enumeration of every subset of feasible transfers (tiny instances)."""
    claimed, _, owner_of, _, _ = _view_arrays(view)
    triples = feasible_transfers(view)
    gate = owner_gates(view)
    best = 0
    for r in range(len(triples), 0, -1):
        if r <= best:
            break
        for sub in itertools.combinations(triples, r):
            su = np.bincount([u for u, _, _ in sub], minlength=len(view.res_up))
            sw = np.bincount([w for _, w, _ in sub], minlength=len(view.res_up))
            so = np.bincount([u for u, _, c in sub if owner_of[c] == u], minlength=len(view.res_up))
            if (su > view.res_up).any() or (sw > view.demand).any() or (so > gate).any():
                continue
            if len({(w, c) for _, w, c in sub}) < r:
                continue
            return r
    return best


# ---------------------------------------------------------------------------
# stage-greedy bound run


@dataclass
class BoundTrace:
    stages: int
    outcome: str
    delivered: list
    utilization: list
    k_achievement: list


def bound_trace(config) -> BoundTrace:
    """Warm-up driven by per-stage max-flow schedules from the same initial state."""
    from .engine import init_state
    from .warmup import prepare_round, run_warmup

    cfg = config.replace(scheduler="maxflow")
    state = init_state(cfg)
    ws = prepare_round(cfg, state)
    res = run_warmup(state, ws)
    total_up = float(state.up.sum())
    util = [s / total_up for s in state.sends_per_slot]
    return BoundTrace(res.slots, res.outcome, list(res.useful), util, list(res.k_achievement))


def write_bound_csv(rows, path) -> None:
    """Rows: ``(stage, bound_chunks, heuristic_chunks, utilization_bound, utilization_heuristic)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "bound_chunks", "heuristic_chunks", "utilization_bound",
                    "utilization_heuristic"])
        for r in rows:
            w.writerow([int(r[0]), int(r[1]), int(r[2]), f"{float(r[3]):.6f}", f"{float(r[4]):.6f}"])


__all__ = [
    "FlowNetwork", "build_stage_network", "max_flow", "decode_schedule", "stage_bound", "trivial_cap",
    "owner_gates", "feasible_transfers", "brute_force_optimum", "brute_force_subsets",
    "BoundTrace", "bound_trace", "write_bound_csv",
]
