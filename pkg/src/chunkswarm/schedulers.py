"""Warm-up stage schedulers.

Every scheduler maps a :class:`StageView` and a seed to an array of directives
for the current stage.  The centralised heuristics (random FIFO, random
fastest-first, greedy fastest-first) and the distributed announcement mode are
request driven: each below-threshold receiver draws requests from the chunks
its neighbourhood can currently serve, in seeded random order, and requests
are handed out in randomly ordered passes over receivers (one request per
receiver per pass).  Flooding is push driven and uses no tracker.

Owner chunks are only offered through the per-stage eligible owner set of each
node (gating plus throttling, see :mod:`chunkswarm.warmup`).  When pacing is
on, a non-emergency owner send is allowed only once the sender's credit, which
grows by ``O_u / B_u`` per transfer, reaches one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import rng
from .overlay import DIRECTIVE_DTYPE, EMERGENCY, SCHEDULED

MODES = {"greedy_ff": 0, "random_fifo": 1, "random_ff": 2, "distributed": 3}


@dataclass
class StageView:
    """What the tracker sees when planning one warm-up stage.

    Array fields are indexed by node.  ``elig_owner[u, :elig_n[u]]`` lists the
    owner chunks ``u`` may serve this stage; ``emergency[u]`` marks a deadlock
    release.  ``credit`` is the pacing credit and is updated in place by the
    schedulers.
    """

    state: object
    stage: int
    demand: np.ndarray
    res_up: np.ndarray
    res_down: np.ndarray
    send_ok: np.ndarray
    elig_owner: np.ndarray
    elig_n: np.ndarray
    emergency: np.ndarray
    credit: np.ndarray
    ratio: np.ndarray
    tau: int = 4
    non_owner_first: bool = True
    paced: bool = True
    stats: np.ndarray = field(default_factory=lambda: np.zeros(4, np.int64))

    @property
    def n(self) -> int:
        return len(self.demand)

    def eligible_holder(self, u: int, c: int) -> bool:
        """Whether ``u`` may serve ``c`` this stage (availability only, no budgets)."""
        st = self.state
        if not self.send_ok[u] or not st.claimed[u, c]:
            return False
        if st.universe.owner_of[c] == u:
            return c in self.elig_owner[u, :self.elig_n[u]]
        return True

    def owner_gate(self, u: int) -> int:
        """Upper bound on owner sends of ``u`` this stage."""
        if self.elig_n[u] == 0:
            return 0
        if self.emergency[u] or not self.paced:
            return int(self.res_up[u])
        return int(min(self.res_up[u], np.floor(self.credit[u] + self.ratio[u] * self.res_up[u] + 1e-9)))


# ---------------------------------------------------------------------------
# set operations


def missing_set(v: int, view: StageView) -> np.ndarray:
    """Chunks some active neighbour of ``v`` holds and ``v`` lacks (sorted ids)."""
    st = view.state
    nbrs = st.adj_idx[st.adj_ptr[v]:st.adj_ptr[v + 1]]
    nbrs = nbrs[st.active[nbrs]]
    if len(nbrs) == 0:
        return np.zeros(0, dtype=np.int64)
    union = st.claimed[nbrs].any(axis=0)
    return np.flatnonzero(union & (st.claimed[v] == 0))


def announcement(v: int, view: StageView) -> np.ndarray:
    """Neighbourhood availability for ``v``: union of neighbours' servable chunks.

    Which neighbour holds what is not part of the announcement.
    """
    st = view.state
    C = st.C
    avail = np.zeros(C, dtype=bool)
    owner_of = st.universe.owner_of
    for u in st.adj_idx[st.adj_ptr[v]:st.adj_ptr[v + 1]]:
        if not st.active[u]:
            continue
        row = st.claimed[u].astype(bool)
        row[owner_of == u] = False
        avail |= row
        avail[view.elig_owner[u, :view.elig_n[u]]] = True
    return np.flatnonzero(avail)


def non_owner_first(candidates, chunk_owner: int) -> list:
    """Stable partition of holders: relays first, the chunk's owner last."""
    cands = list(candidates)
    return [u for u in cands if u != chunk_owner] + [u for u in cands if u == chunk_owner]


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _collect(w, miss_list, miss_len, claimed, NH, owner_of, adjm, active, adj_ptr, adj_idx,
             elig_owner, elig_n, cand):
    L = miss_len[w]
    k = 0
    nc = 0
    m_tot = 0
    m_non = 0
    for i in range(L):
        c = miss_list[w, i]
        if claimed[w, c]:
            continue
        miss_list[w, k] = c
        k += 1
        h = NH[w, c]
        if h <= 0:
            continue
        o = owner_of[c]
        own = 1 if (adjm[w, o] and active[o]) else 0
        m_tot += 1
        if h - own > 0:
            m_non += 1
            cand[w, nc] = c
            nc += 1
    miss_len[w] = k
    for p in range(adj_ptr[w], adj_ptr[w + 1]):
        u = adj_idx[p]
        if not active[u]:
            continue
        for j in range(elig_n[u]):
            c = elig_owner[u, j]
            if claimed[w, c] or NH[w, c] > 1:
                continue
            cand[w, nc] = c
            nc += 1
    return nc, m_tot, m_non


@numba.njit(cache=True)
def _is_elig_owner(u, c, elig_owner, elig_n):
    for j in range(elig_n[u]):
        if elig_owner[u, j] == c:
            return True
    return False


@numba.njit(cache=True)
def _serving(u, w, recv_of, nrecv):
    for j in range(nrecv[u]):
        if recv_of[u, j] == w:
            return True
    return False


@numba.njit(cache=True)
def _any_sender(w, send_ok, ru, tau, recv_of, nrecv, adj_ptr, adj_idx):
    for p in range(adj_ptr[w], adj_ptr[w + 1]):
        u = adj_idx[p]
        if send_ok[u] and ru[u] > 0 and (nrecv[u] < tau or _serving(u, w, recv_of, nrecv)):
            return True
    return False


@numba.njit(cache=True)
def _owner_send_ok(u, emergency, credit, ratio, paced):
    if emergency[u] or not paced:
        return True
    return credit[u] + ratio[u] >= 1.0 - 1e-12


@numba.njit(cache=True)
def _record_send(u, w, c, is_owner, emergency, credit, ratio, recv_of, nrecv,
                 out_s, out_r, out_c, out_f, k):
    credit[u] += ratio[u]
    f = 1
    if is_owner:
        if emergency[u]:
            f |= 8
        else:
            credit[u] -= 1.0
            if credit[u] < 0.0:
                credit[u] = 0.0
    if not _serving(u, w, recv_of, nrecv):
        recv_of[u, nrecv[u]] = w
        nrecv[u] += 1
    out_s[k] = u
    out_r[k] = w
    out_c[k] = c
    out_f[k] = f


@numba.njit(cache=True)
def _plan_kernel(mode, seed, demand, res_up, res_down, send_ok, active, claimed, NH, owner_of,
                 adjm, adj_ptr, adj_idx, miss_list, miss_len, cand, elig_owner, elig_n, emergency,
                 credit, ratio, paced, tau, nof, out_s, out_r, out_c, out_f, stats):
    np.random.seed(seed)
    n = len(demand)
    rem = np.zeros(n, np.int64)
    for w in range(n):
        if demand[w] > 0 and active[w]:
            nc, mt, mn = _collect(w, miss_list, miss_len, claimed, NH, owner_of, adjm, active,
                                  adj_ptr, adj_idx, elig_owner, elig_n, cand)
            rem[w] = nc
            stats[2] += mt
            stats[3] += mn
    recv_list = np.zeros(n, np.int64)
    nr = 0
    for w in range(n):
        if rem[w] > 0:
            recv_list[nr] = w
            nr += 1
    order = recv_list[:nr].copy()
    dem = demand.copy()
    ru = res_up.copy()
    rd = res_down.copy()
    nrecv = np.zeros(n, np.int64)
    recv_of = np.full((n, max(tau, 1)), -1, np.int64)
    queued = np.zeros(n, np.int64)
    k = 0
    cap_req = 1
    for w in range(n):
        cap_req += dem[w] * (adj_ptr[w + 1] - adj_ptr[w] + 1)
    req_u = np.zeros(cap_req, np.int64)
    req_w = np.zeros(cap_req, np.int64)
    req_c = np.zeros(cap_req, np.int64)
    nreq = 0
    while True:
        progress = False
        np.random.shuffle(order)
        for oi in range(nr):
            w = order[oi]
            while dem[w] > 0 and rem[w] > 0 and rd[w] > 0:
                if mode == 0 and not _any_sender(w, send_ok, ru, tau, recv_of, nrecv, adj_ptr, adj_idx):
                    rem[w] = 0
                    break
                j = np.random.randint(0, rem[w])
                c = cand[w, j]
                cand[w, j] = cand[w, rem[w] - 1]
                rem[w] -= 1
                o = owner_of[c]
                stats[0] += 1
                own = 1 if (adjm[w, o] and active[o]) else 0
                if NH[w, c] - own > 0:
                    stats[1] += 1
                if mode == 0:
                    best_non = -1
                    best_own = -1
                    bs_non = -1
                    bq_non = 0
                    for p in range(adj_ptr[w], adj_ptr[w + 1]):
                        u = adj_idx[p]
                        if not send_ok[u] or claimed[u, c] == 0 or ru[u] <= 0:
                            continue
                        if nrecv[u] >= tau and not _serving(u, w, recv_of, nrecv):
                            continue
                        if u == o:
                            if _is_elig_owner(u, c, elig_owner, elig_n) and \
                                    _owner_send_ok(u, emergency, credit, ratio, paced):
                                best_own = u
                            continue
                        s = min(ru[u], rd[w])
                        if s > bs_non or (s == bs_non and queued[u] < bq_non):
                            best_non = u
                            bs_non = s
                            bq_non = queued[u]
                    u = best_non
                    if best_own >= 0:
                        if u < 0:
                            u = best_own
                        elif not nof:
                            s = min(ru[best_own], rd[w])
                            if s > bs_non or (s == bs_non and (queued[best_own] < bq_non or
                                                               (queued[best_own] == bq_non and best_own < u))):
                                u = best_own
                    if u < 0:
                        continue
                    _record_send(u, w, c, u == o, emergency, credit, ratio, recv_of, nrecv,
                                 out_s, out_r, out_c, out_f, k)
                    k += 1
                    ru[u] -= 1
                    rd[w] -= 1
                    dem[w] -= 1
                    queued[u] += 1
                    progress = True
                    break
                else:
                    # random modes and distributed: build requests, serve later
                    n_non = 0
                    has_own = False
                    for p in range(adj_ptr[w], adj_ptr[w + 1]):
                        u = adj_idx[p]
                        if not active[u] or claimed[u, c] == 0:
                            continue
                        if mode != 3 and not send_ok[u]:
                            continue
                        if u == o:
                            if _is_elig_owner(u, c, elig_owner, elig_n):
                                has_own = True
                            continue
                        n_non += 1
                    if n_non == 0 and not has_own:
                        continue
                    if mode == 3:
                        for p in range(adj_ptr[w], adj_ptr[w + 1]):
                            u = adj_idx[p]
                            if not active[u] or claimed[u, c] == 0:
                                continue
                            if u == o and not _is_elig_owner(u, c, elig_owner, elig_n):
                                continue
                            req_u[nreq] = u
                            req_w[nreq] = w
                            req_c[nreq] = c
                            nreq += 1
                    else:
                        if n_non > 0 and (nof or not has_own):
                            pick = np.random.randint(0, n_non)
                            chosen = -1
                            for p in range(adj_ptr[w], adj_ptr[w + 1]):
                                u = adj_idx[p]
                                if not send_ok[u] or claimed[u, c] == 0 or u == o:
                                    continue
                                if pick == 0:
                                    chosen = u
                                    break
                                pick -= 1
                        elif n_non == 0:
                            chosen = o
                        else:
                            pick = np.random.randint(0, n_non + 1)
                            chosen = o
                            for p in range(adj_ptr[w], adj_ptr[w + 1]):
                                u = adj_idx[p]
                                if not send_ok[u] or claimed[u, c] == 0 or u == o:
                                    continue
                                if pick == 0:
                                    chosen = u
                                    break
                                pick -= 1
                        req_u[nreq] = chosen
                        req_w[nreq] = w
                        req_c[nreq] = c
                        nreq += 1
                    dem[w] -= 1
                    rd[w] -= 1
                    progress = True
                    break
        if not progress:
            break
    if mode != 0 and nreq > 0:
        # group requests by sender, keeping arrival order (FIFO)
        cnt = np.zeros(n + 1, np.int64)
        for i in range(nreq):
            cnt[req_u[i] + 1] += 1
        for u in range(n):
            cnt[u + 1] += cnt[u]
        pos = cnt.copy()
        byu = np.zeros(nreq, np.int64)
        for i in range(nreq):
            byu[pos[req_u[i]]] = i
            pos[req_u[i]] += 1
        for u in range(n):
            lo = cnt[u]
            hi = cnt[u + 1]
            if hi == lo or not send_ok[u]:
                continue
            idx = byu[lo:hi].copy()
            if mode == 2:
                key = np.zeros(hi - lo, np.int64)
                for t in range(hi - lo):
                    key[t] = -min(res_up[u], res_down[req_w[idx[t]]])
                idx = idx[np.argsort(key, kind="mergesort")]
            for t in range(hi - lo):
                if ru[u] <= 0:
                    break
                i = idx[t]
                w = req_w[i]
                c = req_c[i]
                if nrecv[u] >= tau and not _serving(u, w, recv_of, nrecv):
                    continue
                is_owner = owner_of[c] == u
                if is_owner and not _owner_send_ok(u, emergency, credit, ratio, paced):
                    continue
                _record_send(u, w, c, is_owner, emergency, credit, ratio, recv_of, nrecv,
                             out_s, out_r, out_c, out_f, k)
                k += 1
                ru[u] -= 1
    return k


@numba.njit(cache=True)
def _flood_kernel(seed, res_up, send_ok, target, held_list, count, K, owner_of, elig_owner, elig_n,
                  emergency, credit, ratio, paced, tau, adj_ptr, adj_idx, sent_edge,
                  out_s, out_r, out_c, out_f):
    np.random.seed(seed)
    n = len(res_up)
    order = np.arange(n)
    np.random.shuffle(order)
    nrecv = np.zeros(n, np.int64)
    recv_of = np.full((n, max(tau, 1)), -1, np.int64)
    k = 0
    for oi in range(n):
        u = order[oi]
        if not send_ok[u]:
            continue
        lo = adj_ptr[u]
        hi = adj_ptr[u + 1]
        nb = 0
        for p in range(lo, hi):
            if target[adj_idx[p]]:
                nb += 1
        if nb == 0:
            continue
        pos = np.zeros(nb, np.int64)
        t = 0
        for p in range(lo, hi):
            if target[adj_idx[p]]:
                pos[t] = p
                t += 1
        n_non = count[u] - K[u]
        n_own = elig_n[u]
        nbuf = n_non + n_own
        if nbuf == 0:
            continue
        for unit in range(res_up[u]):
            found = -1
            fc = -1
            for attempt in range(64):
                p = pos[np.random.randint(0, nb)]
                w = adj_idx[p]
                if nrecv[u] >= tau and not _serving(u, w, recv_of, nrecv):
                    continue
                j = np.random.randint(0, nbuf)
                c = held_list[u, K[u] + j] if j < n_non else elig_owner[u, j - n_non]
                if sent_edge[p, c]:
                    continue
                if j >= n_non and not _owner_send_ok(u, emergency, credit, ratio, paced):
                    continue
                found = p
                fc = c
                break
            if found < 0:
                # exhaustive fallback: uniform over all fresh pairs
                total = 0
                for a in range(nb):
                    w = adj_idx[pos[a]]
                    if nrecv[u] >= tau and not _serving(u, w, recv_of, nrecv):
                        continue
                    for j in range(nbuf):
                        c = held_list[u, K[u] + j] if j < n_non else elig_owner[u, j - n_non]
                        if sent_edge[pos[a], c]:
                            continue
                        if j >= n_non and not _owner_send_ok(u, emergency, credit, ratio, paced):
                            continue
                        total += 1
                if total == 0:
                    break
                pick = np.random.randint(0, total)
                for a in range(nb):
                    if found >= 0:
                        break
                    w = adj_idx[pos[a]]
                    if nrecv[u] >= tau and not _serving(u, w, recv_of, nrecv):
                        continue
                    for j in range(nbuf):
                        c = held_list[u, K[u] + j] if j < n_non else elig_owner[u, j - n_non]
                        if sent_edge[pos[a], c]:
                            continue
                        if j >= n_non and not _owner_send_ok(u, emergency, credit, ratio, paced):
                            continue
                        if pick == 0:
                            found = pos[a]
                            fc = c
                            break
                        pick -= 1
            w = adj_idx[found]
            sent_edge[found, fc] = 1
            _record_send(u, w, fc, owner_of[fc] == u, emergency, credit, ratio, recv_of, nrecv,
                         out_s, out_r, out_c, out_f, k)
            k += 1
    return k


# ---------------------------------------------------------------------------
# public schedulers


def _workspace(state, name, shape, dtype):
    ws = state.__dict__.setdefault("_workspace", {})
    arr = ws.get(name)
    if arr is None or arr.shape != shape:
        arr = np.zeros(shape, dtype=dtype)
        ws[name] = arr
    return arr


def _kernel_seed(seed: int, stage: int, salt: int = 0) -> int:
    return rng.derive_seed(seed, rng.SCHEDULE, stage, salt) % (2**32 - 1)


def _pack(out_s, out_r, out_c, out_f, k, stage) -> np.ndarray:
    d = np.zeros(k, dtype=DIRECTIVE_DTYPE)
    d["stage"] = stage
    d["sender"] = out_s[:k]
    d["receiver"] = out_r[:k]
    d["chunk"] = out_c[:k]
    d["flags"] = out_f[:k]
    return d


def _run_requests(mode: int, view: StageView, seed: int) -> np.ndarray:
    st = view.state
    n = view.n
    cap = int(view.res_up.sum()) + 1
    out_s = np.zeros(cap, np.int64)
    out_r = np.zeros(cap, np.int64)
    out_c = np.zeros(cap, np.int64)
    out_f = np.zeros(cap, np.uint8)
    cand = _workspace(st, "cand", (n, st.C), np.int32)
    k = _plan_kernel(mode, _kernel_seed(seed, view.stage), view.demand.astype(np.int64),
                     view.res_up.astype(np.int64), view.res_down.astype(np.int64), view.send_ok,
                     st.active, st.claimed, st.NH, st.universe.owner_of, st.adjm, st.adj_ptr,
                     st.adj_idx, st.miss_list, st.miss_len, cand, view.elig_owner,
                     view.elig_n.astype(np.int64), view.emergency, view.credit, view.ratio,
                     view.paced, view.tau, view.non_owner_first, out_s, out_r, out_c, out_f,
                     view.stats)
    return _pack(out_s, out_r, out_c, out_f, k, view.stage)


def schedule_greedy_fastest_first(view: StageView, seed: int) -> np.ndarray:
    """Assign each request to the feasible holder maximising ``min(res_up, res_down)``.

    Ties go to the holder with fewer requests queued this stage, then to the
    lowest node id.  With non-owner-first, the owner is chosen only when no
    relay is feasible.
    """
    return _run_requests(0, view, seed)


def schedule_random_fifo(view: StageView, seed: int) -> np.ndarray:
    """Assign each request to a uniformly random eligible holder; senders serve FIFO."""
    return _run_requests(1, view, seed)


def schedule_random_fastest_first(view: StageView, seed: int) -> np.ndarray:
    """Random holder assignment; senders serve requesters by descending bottleneck rate."""
    return _run_requests(2, view, seed)


def schedule_distributed(view: StageView, seed: int) -> np.ndarray:
    """Announcement-based requests broadcast to all neighbours; holders serve FIFO.

    Several holders may serve the same request; the engine cancels the
    duplicates on delivery.
    """
    return _run_requests(3, view, seed)


def schedule_flooding(view: StageView, seed: int) -> np.ndarray:
    """Each node pushes random (neighbour, eligible chunk) pairs it has not sent before."""
    st = view.state
    n = view.n
    E = len(st.adj_idx)
    sent_edge = _workspace(st, "sent_edge", (E, st.C), np.uint8)
    cap = int(view.res_up.sum()) + 1
    out_s = np.zeros(cap, np.int64)
    out_r = np.zeros(cap, np.int64)
    out_c = np.zeros(cap, np.int64)
    out_f = np.zeros(cap, np.uint8)
    target = (view.demand > 0) & st.active
    k = _flood_kernel(_kernel_seed(seed, view.stage), view.res_up.astype(np.int64), view.send_ok,
                      target, st.held_list, st.count, st.universe.K, st.universe.owner_of,
                      view.elig_owner, view.elig_n.astype(np.int64), view.emergency, view.credit,
                      view.ratio, view.paced, view.tau, st.adj_ptr, st.adj_idx, sent_edge,
                      out_s, out_r, out_c, out_f)
    return _pack(out_s, out_r, out_c, out_f, k, view.stage)


def schedule_maxflow(view: StageView, seed: int) -> np.ndarray:
    """Offline comparison only: a maximum-flow schedule for this stage."""
    from .maxflow import build_stage_network, decode_schedule, max_flow

    net = build_stage_network(view)
    _, flow = max_flow(net)
    d = decode_schedule(net, flow)
    # pacing bookkeeping mirrors the heuristics
    owner_of = view.state.universe.owner_of
    for row in d:
        u = int(row["sender"])
        view.credit[u] += view.ratio[u]
        if owner_of[row["chunk"]] == u and not view.emergency[u]:
            view.credit[u] = max(0.0, view.credit[u] - 1.0)
    return d


SCHEDULER_FUNCS = {
    "greedy_ff": schedule_greedy_fastest_first,
    "random_fifo": schedule_random_fifo,
    "random_ff": schedule_random_fastest_first,
    "distributed": schedule_distributed,
    "flooding": schedule_flooding,
    "maxflow": schedule_maxflow,
}


def schedule(name: str, view: StageView, seed: int) -> np.ndarray:
    return SCHEDULER_FUNCS[name](view, seed)


__all__ = [
    "StageView", "missing_set", "announcement", "non_owner_first", "schedule",
    "schedule_greedy_fastest_first", "schedule_random_fifo", "schedule_random_fastest_first",
    "schedule_distributed", "schedule_flooding", "schedule_maxflow", "SCHEDULER_FUNCS",
    "EMERGENCY", "SCHEDULED",
]
