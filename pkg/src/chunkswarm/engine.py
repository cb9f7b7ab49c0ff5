"""Deterministic slotted execution of transfer directives.

All per-node state lives in dense numpy arrays on :class:`SimState` so that the
hot loops can run as numba kernels.  Two inventories are tracked:

``held``
    what a node really has.
``claimed``
    what the tracker believes it has (its bitfield).  Identical for honest
    nodes; a Byzantine node that lies about its bitfield claims extra chunks.

``NH[w, c]`` counts the active neighbours of ``w`` that claim chunk ``c``; it is
maintained incrementally and drives both warm-up candidate discovery and
rarest-first selection.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from . import rng
from .config import ChunkUniverse, RoundConfig
from .overlay import DIRECTIVE_DTYPE, EMERGENCY, RETRY, SPRAY, Overlay, generate_overlay

log = logging.getLogger(__name__)

# step() outcome codes
EXECUTED = 0
FAILED = 1  # charged, discarded by the receiver's hash check
DEFER_BUDGET = 2
DEFER_WITHHELD = 3
DEFER_DELAYED = 4
CANCELLED_DUPLICATE = 5
SKIPPED_INACTIVE = 6

PHASE_SPRAY = 0
PHASE_WARMUP = 1
PHASE_BT = 2
PHASE_NAMES = ("spray", "warmup", "bittorrent")

OBSERVATION_DTYPE = np.dtype([
    ("slot", np.int32),
    ("observer", np.int32),
    ("sender_pseudonym", np.int32),
    ("chunk", np.int32),
    ("phase", np.int8),
])


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _gain(w, c, held, claimed, NH, count, ccount, held_list, adj_ptr, adj_idx):
    held[w, c] = 1
    held_list[w, count[w]] = c
    count[w] += 1
    if claimed[w, c] == 0:
        claimed[w, c] = 1
        ccount[w] += 1
        for p in range(adj_ptr[w], adj_ptr[w + 1]):
            NH[adj_idx[p], c] += 1


@numba.njit(cache=True)
def _unclaim(u, c, claimed, NH, ccount, adj_ptr, adj_idx):
    claimed[u, c] = 0
    ccount[u] -= 1
    for p in range(adj_ptr[u], adj_ptr[u + 1]):
        NH[adj_idx[p], c] -= 1


@numba.njit(cache=True)
def _withdraw_claims(u, claimed, NH, adj_ptr, adj_idx):
    C = claimed.shape[1]
    for c in range(C):
        if claimed[u, c]:
            for p in range(adj_ptr[u], adj_ptr[u + 1]):
                NH[adj_idx[p], c] -= 1


@numba.njit(cache=True)
def _step_kernel(stage, phase, snd, rcv, chk, flg, age, coin, status,
                 held, claimed, NH, count, ccount, held_list, adj_ptr, adj_idx,
                 res_up, res_down, active, owner_of, osent, failed, lagged_until,
                 withhold_p, delay, sent_slot, recv_slot,
                 tl_stage, tl_snd, tl_rcv, tl_chk, tl_flg, tl_ok, tl_phase, tl_len):
    n_exec = 0
    for i in range(len(snd)):
        u = snd[i]
        w = rcv[i]
        c = chk[i]
        if not active[u] or not active[w]:
            status[i] = 6
            continue
        if withhold_p[u] > 0.0 and coin[i] < withhold_p[u]:
            status[i] = 3
            continue
        if age[i] < delay[u] or stage < lagged_until[u]:
            status[i] = 4
            continue
        if held[w, c]:
            status[i] = 5
            continue
        if res_up[u] <= 0 or res_down[w] <= 0:
            status[i] = 2
            continue
        res_up[u] -= 1
        res_down[w] -= 1
        sent_slot[u] = stage
        recv_slot[w] = stage
        f = flg[i]
        if failed[w, c]:
            f |= 4
        k = tl_len[0]
        tl_stage[k] = stage
        tl_snd[k] = u
        tl_rcv[k] = w
        tl_chk[k] = c
        tl_phase[k] = phase
        tl_len[0] = k + 1
        if held[u, c] == 0:
            # advertised but not held: the receiver's hash check discards it
            status[i] = 1
            failed[w, c] = 1
            tl_flg[k] = f
            tl_ok[k] = 0
            if claimed[u, c]:
                _unclaim(u, c, claimed, NH, ccount, adj_ptr, adj_idx)
            continue
        status[i] = 0
        tl_flg[k] = f
        tl_ok[k] = 1
        n_exec += 1
        _gain(w, c, held, claimed, NH, count, ccount, held_list, adj_ptr, adj_idx)
        if owner_of[c] == u:
            osent[c] = 1
    return n_exec


@numba.njit(cache=True)
def _init_neighbor_counts(claimed, NH, adj_ptr, adj_idx, active):
    n, C = claimed.shape
    for u in range(n):
        if not active[u]:
            continue
        for c in range(C):
            if claimed[u, c]:
                for p in range(adj_ptr[u], adj_ptr[u + 1]):
                    NH[adj_idx[p], c] += 1


# ---------------------------------------------------------------------------
# state


@dataclass
class SimState:
    """Mutable per-round simulation state (dense arrays, one row per node)."""

    config: RoundConfig
    overlay: Overlay
    universe: ChunkUniverse
    up: np.ndarray
    down: np.ndarray
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    adjm: np.ndarray
    held: np.ndarray
    claimed: np.ndarray
    NH: np.ndarray
    count: np.ndarray
    ccount: np.ndarray
    held_list: np.ndarray
    miss_list: np.ndarray
    miss_len: np.ndarray
    active: np.ndarray
    osent: np.ndarray
    failed: np.ndarray
    lagged_until: np.ndarray
    withhold_p: np.ndarray
    delay: np.ndarray
    pseudonym: np.ndarray
    slot: int = 0
    res_up: np.ndarray | None = None
    res_down: np.ndarray | None = None
    sent_slot: np.ndarray | None = None
    recv_slot: np.ndarray | None = None
    inactive_reasons: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    sends_per_slot: list = field(default_factory=list)
    # transfer log (executed and failed deliveries), grown on demand
    _tl: dict = field(default_factory=dict)
    tl_len: np.ndarray = field(default_factory=lambda: np.zeros(1, np.int64))
    n_spray: int = 0
    spray_log: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def C(self) -> int:
        return self.universe.size

    def new_slot(self, slot: int) -> None:
        self.slot = slot
        self.res_up = self.up.copy()
        self.res_down = self.down.copy()

    def transfers(self) -> dict:
        """Columns of the transfer log truncated to the filled length."""
        k = int(self.tl_len[0])
        return {name: arr[:k] for name, arr in self._tl.items()}

    def _reserve(self, extra: int) -> None:
        k = int(self.tl_len[0])
        cap = len(self._tl["stage"])
        if k + extra <= cap:
            return
        new_cap = max(2 * cap, k + extra)
        for name, arr in self._tl.items():
            grown = np.zeros(new_cap, dtype=arr.dtype)
            grown[:k] = arr[:k]
            self._tl[name] = grown


def init_state(config: RoundConfig, overlay: Overlay | None = None) -> SimState:
    """Fresh round state: every node holds exactly its own chunks."""
    config.validate_feasible()
    if overlay is None:
        overlay = generate_overlay(config.n, config.m, config.seed)
    uni = config.universe()
    caps = config.capacities()
    n, C = config.n, uni.size
    adj_ptr, adj_idx = overlay.csr()
    held = uni.owner_mask().astype(np.uint8)
    claimed = held.copy()
    count = uni.K.astype(np.int64).copy()
    held_list = np.zeros((n, C), dtype=np.int32)
    miss_list = np.zeros((n, C), dtype=np.int32)
    for v in range(n):
        held_list[v, :uni.K[v]] = np.arange(uni.offsets[v], uni.offsets[v + 1])
        others = np.concatenate([np.arange(0, uni.offsets[v]), np.arange(uni.offsets[v + 1], C)])
        miss_list[v, :len(others)] = others
    miss_len = C - uni.K.astype(np.int64)

    withhold = np.zeros(n)
    delay = np.zeros(n, dtype=np.int64)
    fs = config.fault_spec
    if fs is not None:
        fg = rng.stream(config.seed, rng.FAULTS)
        for v, b in sorted(fs.byzantine.items()):
            withhold[v] = b.withhold
            delay[v] = b.delay
            if b.lie_bitfield > 0:
                fake = (fg.random(C) < b.lie_bitfield) & (held[v] == 0)
                claimed[v, fake] = 1
    active = np.ones(n, dtype=np.bool_)
    NH = np.zeros((n, C), dtype=np.int16)
    _init_neighbor_counts(claimed, NH, adj_ptr, adj_idx, active)
    cap0 = n * C // 4 + 1024
    tl = {
        "stage": np.zeros(cap0, np.int32),
        "sender": np.zeros(cap0, np.int32),
        "receiver": np.zeros(cap0, np.int32),
        "chunk": np.zeros(cap0, np.int32),
        "flags": np.zeros(cap0, np.uint8),
        "ok": np.zeros(cap0, np.uint8),
        "phase": np.zeros(cap0, np.int8),
    }
    pseudonym = rng.stream(config.seed, rng.PSEUDONYMS).permutation(n).astype(np.int32)
    st = SimState(
        config=config, overlay=overlay, universe=uni,
        up=np.array([c.up_chunks for c in caps], dtype=np.int64),
        down=np.array([c.down_chunks for c in caps], dtype=np.int64),
        adj_ptr=adj_ptr, adj_idx=adj_idx, adjm=overlay.matrix(),
        held=held, claimed=claimed, NH=NH, count=count,
        ccount=claimed.sum(axis=1).astype(np.int64), held_list=held_list,
        miss_list=miss_list, miss_len=miss_len, active=active,
        osent=np.zeros(C, dtype=np.uint8), failed=np.zeros((n, C), dtype=np.uint8),
        lagged_until=np.zeros(n, dtype=np.int64), withhold_p=withhold, delay=delay,
        pseudonym=pseudonym, _tl=tl,
    )
    st.sent_slot = np.full(n, -1, dtype=np.int64)
    st.recv_slot = np.full(n, -1, dtype=np.int64)
    st.new_slot(0)
    return st


def sort_directives(d: np.ndarray) -> np.ndarray:
    """Stable execution order within a slot: by (sender, receiver, chunk)."""
    order = np.lexsort((d["chunk"], d["receiver"], d["sender"]))
    return d[order]


def step(state: SimState, directives: np.ndarray, phase: int = PHASE_WARMUP,
         ages: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply one slot's directives against the current residual budgets.

    Returns ``(executed, deferred, status)`` where ``status`` holds one outcome
    code per directive (in the sorted execution order).  Deferred directives
    are those over budget, withheld or delayed; duplicates are cancelled and
    directives touching inactive nodes are skipped.
    """
    d = np.asarray(directives, dtype=DIRECTIVE_DTYPE)
    if ages is None:
        ages = np.zeros(len(d), dtype=np.int64)
    order = np.lexsort((d["chunk"], d["receiver"], d["sender"]))
    d = d[order]
    ages = np.asarray(ages, dtype=np.int64)[order]
    status = np.zeros(len(d), dtype=np.int8)
    if len(d) == 0:
        return d, d, status
    state._reserve(len(d))
    coin = rng.stream(state.config.seed, rng.FAULTS, 1, state.slot).random(len(d))
    tl = state._tl
    _step_kernel(state.slot, phase, d["sender"], d["receiver"], d["chunk"], d["flags"], ages, coin,
                 status, state.held, state.claimed, state.NH, state.count, state.ccount,
                 state.held_list, state.adj_ptr, state.adj_idx, state.res_up, state.res_down,
                 state.active, state.universe.owner_of, state.osent, state.failed,
                 state.lagged_until, state.withhold_p, state.delay, state.sent_slot,
                 state.recv_slot, tl["stage"], tl["sender"], tl["receiver"], tl["chunk"],
                 tl["flags"], tl["ok"], tl["phase"], state.tl_len)
    for i in np.flatnonzero(status == FAILED):
        state.violations.append(("failed_delivery", state.slot, int(d["sender"][i]),
                                 int(d["receiver"][i]), int(d["chunk"][i])))
    for i in np.flatnonzero(status == SKIPPED_INACTIVE):
        log.debug("slot %d: skipped directive %s touching inactive node", state.slot, d[i])
    deferred = d[(status == DEFER_BUDGET) | (status == DEFER_WITHHELD) | (status == DEFER_DELAYED)]
    executed = d[status == EXECUTED]
    return executed, deferred, status


def apply_spray(state: SimState, directives: np.ndarray) -> None:
    """Execute tracker-tunnelled spray directives at virtual stage -1, uncharged."""
    d = np.asarray(directives, dtype=DIRECTIVE_DTYPE)
    state._reserve(len(d))
    k0 = int(state.tl_len[0])
    for row in d:
        u, w, c = int(row["sender"]), int(row["receiver"]), int(row["chunk"])
        if state.held[w, c]:
            continue
        _gain(w, c, state.held, state.claimed, state.NH, state.count, state.ccount,
              state.held_list, state.adj_ptr, state.adj_idx)
        state.osent[c] = 1
        k = int(state.tl_len[0])
        for name, val in (("stage", -1), ("sender", u), ("receiver", w), ("chunk", c),
                          ("flags", SPRAY), ("ok", 1), ("phase", PHASE_SPRAY)):
            state._tl[name][k] = val
        state.tl_len[0] = k + 1
    state.n_spray = int(state.tl_len[0]) - k0


def mark_inactive(state: SimState, node: int, reason: str) -> SimState:
    """Remove ``node`` from the active set; later directives touching it are skipped."""
    if not state.active[node]:
        return state
    state.active[node] = False
    _withdraw_claims(node, state.claimed, state.NH, state.adj_ptr, state.adj_idx)
    state.inactive_reasons[int(node)] = (state.slot, reason)
    log.info("slot %d: node %d marked inactive (%s)", state.slot, node, reason)
    return state


def utilization(sends_per_slot, up_budgets, horizon: int) -> float:
    """Executed sends over the first ``horizon`` slots divided by ``horizon * sum(u_v)``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    total = float(np.sum(np.asarray(sends_per_slot, dtype=np.int64)[:horizon]))
    return total / (horizon * float(np.sum(up_budgets)))


# ---------------------------------------------------------------------------
# observations


def observations(state: SimState, include_failed: bool = False) -> np.ndarray:
    """Observation log: one record per completed delivery, as seen by the receiver.

    Spray deliveries carry one-off pseudonyms numbered from ``n`` upward; every
    other delivery carries the sender's round pseudonym.
    """
    t = state.transfers()
    keep = t["ok"] == 1 if not include_failed else np.ones(len(t["ok"]), bool)
    out = np.zeros(int(keep.sum()), dtype=OBSERVATION_DTYPE)
    out["slot"] = t["stage"][keep]
    out["observer"] = t["receiver"][keep]
    out["chunk"] = t["chunk"][keep]
    out["phase"] = t["phase"][keep]
    snd = t["sender"][keep]
    pseud = state.pseudonym[snd]
    spray = out["phase"] == PHASE_SPRAY
    pseud = pseud.copy()
    pseud[spray] = state.n + np.arange(int(spray.sum()), dtype=np.int32)
    out["sender_pseudonym"] = pseud
    return out


def ground_truth_senders(state: SimState) -> np.ndarray:
    """True sender of each observation, aligned with :func:`observations`."""
    t = state.transfers()
    return t["sender"][t["ok"] == 1].copy()


def write_observations_csv(obs: np.ndarray, universe: ChunkUniverse, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "observer", "sender_pseudonym", "chunk_owner", "chunk_index", "phase"])
        owners = universe.owner_of[obs["chunk"]]
        idx = universe.index_of[obs["chunk"]]
        for r, o, i in zip(obs, owners, idx):
            w.writerow([int(r["slot"]), int(r["observer"]), int(r["sender_pseudonym"]), int(o), int(i),
                        PHASE_NAMES[int(r["phase"])]])


def read_observations_csv(path, universe: ChunkUniverse) -> np.ndarray:
    rows = list(csv.DictReader(open(path)))
    out = np.zeros(len(rows), dtype=OBSERVATION_DTYPE)
    for k, r in enumerate(rows):
        out[k] = (int(r["slot"]), int(r["observer"]), int(r["sender_pseudonym"]),
                  universe.gid(int(r["chunk_owner"]), int(r["chunk_index"])),
                  PHASE_NAMES.index(r["phase"]))
    return out


def directive_log(state: SimState) -> np.ndarray:
    """Executed (including failed) directives as a DIRECTIVE_DTYPE array ordered by stage."""
    t = state.transfers()
    d = np.zeros(len(t["stage"]), dtype=DIRECTIVE_DTYPE)
    for name in ("stage", "sender", "receiver", "chunk", "flags"):
        d[name] = t[name]
    return d[np.argsort(d["stage"], kind="stable")]


__all__ = [
    "SimState", "init_state", "step", "apply_spray", "mark_inactive", "utilization",
    "observations", "ground_truth_senders", "write_observations_csv", "read_observations_csv",
    "directive_log", "sort_directives", "EMERGENCY", "RETRY", "SPRAY",
]
