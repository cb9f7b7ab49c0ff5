"""Warm-up privacy mechanisms and the warm-up stage loop.

* pre-round spray: ``floor(R * K_v)`` owner chunks per node, tunnelled by the
  tracker to random non-neighbours under one-off pseudonyms before slot 0;
* randomised lags: node ``v`` starts sending at slot ``l_v ~ Unif{0..T_lag-1}``;
* cover-set gating with owner throttling: a node serves owner chunks only once
  it holds ``k_beta`` chunks, and then at most ``kappa`` of them at a time.

Pacing (``origin_oblivious``) additionally makes each owner send cost one unit
of credit, where every transfer of ``u`` earns ``O_u / B_u``.  This is the rate
an origin-oblivious draw from the eligible buffer would produce.

If a stage plans nothing while an active node is still below ``k_beta``, the
neighbours of the starving nodes each release one owner chunk for that stage
(an emergency release); such transfers carry the ``EMERGENCY`` flag.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .config import RoundConfig
from .engine import PHASE_WARMUP, SimState, apply_spray, mark_inactive, step
from .overlay import DIRECTIVE_DTYPE, SPRAY, Overlay
from .schedulers import StageView, schedule

log = logging.getLogger(__name__)

CONTINUE = "continue"
SWITCH_TO_BT = "switch_to_bt"
FAIL_OPEN = "fail_open"


def preround_spray(overlay: Overlay, K, R: float, seed: int) -> np.ndarray:
    """Spray directives for stage -1.

    Each node ``v`` picks ``floor(R * K_v)`` distinct owner chunks uniformly and
    sends each to a uniformly random non-neighbour.  ``K`` is the per-node chunk
    count; chunk ids are global (node blocks laid out consecutively).
    """
    if not 0.0 <= R < 1.0:
        raise ValueError(f"R must lie in [0, 1), got {R}")
    K = np.asarray(K, dtype=np.int64)
    n = overlay.n
    offsets = np.concatenate([[0], np.cumsum(K)])
    g = rng.stream(seed, rng.SPRAY)
    A = overlay.matrix()
    rows = []
    for v in range(n):
        sigma = int(np.floor(round(R * K[v], 9)))
        if sigma == 0:
            continue
        others = np.flatnonzero(~A[v])
        others = others[others != v]
        if len(others) == 0:
            log.warning("node %d has no non-neighbour; spray skipped", v)
            continue
        picks = g.choice(int(K[v]), size=sigma, replace=False)
        targets = others[g.integers(0, len(others), size=sigma)]
        for idx, w in zip(picks, targets):
            rows.append((-1, v, int(w), int(offsets[v] + idx), SPRAY))
    return np.array(rows, dtype=DIRECTIVE_DTYPE) if rows else np.zeros(0, DIRECTIVE_DTYPE)


def sample_lags(n: int, T_lag: int, seed: int) -> np.ndarray:
    """I.i.d. start lags, uniform over ``{0, ..., T_lag - 1}``."""
    if T_lag < 1:
        raise ValueError("T_lag must be >= 1")
    return rng.stream(seed, rng.LAGS).integers(0, T_lag, size=n)


@dataclass
class WarmupState:
    """Per-round warm-up bookkeeping."""

    lags: np.ndarray
    k_beta: int
    kappa: int
    credit: np.ndarray
    cross_stage: np.ndarray
    rotation: np.ndarray
    sprayed: np.ndarray = field(default_factory=lambda: np.zeros(0, DIRECTIVE_DTYPE))
    emergency_releases: int = 0
    # per-stage owner allowance: chunk ids (padded with -1) and emergency flags
    elig_owner: np.ndarray | None = None
    elig_n: np.ndarray | None = None
    emergency: np.ndarray | None = None

    @classmethod
    def create(cls, config: RoundConfig, lags) -> "WarmupState":
        n = config.n
        return cls(lags=np.asarray(lags, dtype=np.int64), k_beta=config.k_beta, kappa=config.kappa,
                   credit=np.zeros(n), cross_stage=np.full(n, -1, dtype=np.int64),
                   rotation=np.zeros(n, dtype=np.int64),
                   elig_owner=np.full((n, config.kappa), -1, dtype=np.int64),
                   elig_n=np.zeros(n, dtype=np.int64), emergency=np.zeros(n, dtype=bool))

    def crossed_threshold(self, state: SimState) -> np.ndarray:
        return state.ccount >= self.k_beta


def _owner_chunks_to_offer(state: SimState, ws: WarmupState, u: int, limit: int) -> np.ndarray:
    """Lowest-index owner chunks not yet relayed; round-robin once all have left."""
    uni = state.universe
    lo, hi = int(uni.offsets[u]), int(uni.offsets[u + 1])
    unsent = np.flatnonzero(state.osent[lo:hi] == 0)[:limit]
    if len(unsent):
        return lo + unsent
    K = hi - lo
    return lo + (ws.rotation[u] + np.arange(min(limit, K))) % K


def refresh_owner_allowance(state: SimState, ws: WarmupState, degenerate: bool = False) -> None:
    """Recompute each node's eligible owner chunks for the current stage."""
    n = state.n
    ws.elig_owner[:] = -1
    ws.elig_n[:] = 0
    ws.emergency[:] = False
    above = ws.crossed_threshold(state) | degenerate
    for u in np.flatnonzero(above & state.active):
        ch = _owner_chunks_to_offer(state, ws, int(u), ws.kappa)
        ws.elig_owner[u, :len(ch)] = ch
        ws.elig_n[u] = len(ch)
        if state.osent[state.universe.offsets[u]:state.universe.offsets[u + 1]].all():
            ws.rotation[u] += ws.kappa


def eligible_buffer(node: int, state: SimState, ws: WarmupState) -> np.ndarray:
    """Chunk ids ``node`` may serve this stage: held relays plus its eligible owner chunks."""
    uni = state.universe
    held = np.flatnonzero(state.claimed[node])
    relays = held[uni.owner_of[held] != node]
    own = ws.elig_owner[node, :ws.elig_n[node]]
    return np.concatenate([relays, own]).astype(np.int64)


def warmup_complete(state: SimState, active, k_beta: int, s_max: int) -> str:
    """``switch_to_bt`` once every active node holds ``k_beta`` chunks, ``fail_open`` at the deadline."""
    active = np.asarray(active, dtype=bool)
    if np.all(state.ccount[active] >= k_beta):
        return SWITCH_TO_BT
    if state.slot + 1 >= s_max:
        return FAIL_OPEN
    return CONTINUE


def release_emergency(state: SimState, ws: WarmupState, starving: np.ndarray) -> int:
    """Each neighbour of a starving node offers one owner chunk this stage."""
    released = 0
    for w in starving:
        for u in state.adj_idx[state.adj_ptr[w]:state.adj_ptr[w + 1]]:
            if not state.active[u] or ws.emergency[u]:
                continue
            ch = _owner_chunks_to_offer(state, ws, int(u), 1)
            ws.elig_owner[u, :] = -1
            ws.elig_owner[u, 0] = ch[0]
            ws.elig_n[u] = 1
            ws.emergency[u] = True
            released += 1
    ws.emergency_releases += released
    return released


def owner_ratio(state: SimState, ws: WarmupState) -> np.ndarray:
    """Per-node ``O_u / B_u`` for the current stage (0 when no owner chunk is offered)."""
    O = np.where(ws.emergency, 0, ws.elig_n).astype(float)
    nonowner = state.count - state.universe.K
    B = nonowner + O
    return np.divide(O, B, out=np.zeros_like(O), where=B > 0)


def make_view(state: SimState, ws: WarmupState, stage: int, demand: np.ndarray) -> StageView:
    cfg = state.config
    send_ok = state.active & (ws.lags <= stage)
    return StageView(
        state=state, stage=stage, demand=demand.astype(np.int64), res_up=state.res_up.copy(),
        res_down=state.res_down.copy(), send_ok=send_ok, elig_owner=ws.elig_owner,
        elig_n=ws.elig_n, emergency=ws.emergency, credit=ws.credit, ratio=owner_ratio(state, ws),
        tau=cfg.tau, non_owner_first=cfg.non_owner_first, paced=cfg.origin_oblivious,
    )


def cover_demand(state: SimState, k_beta: int, degenerate: bool = False) -> np.ndarray:
    """Requests each node may issue this stage: ``min(res_down, k_beta - held)`` below threshold."""
    if degenerate:
        return np.where(state.active, state.res_down, 0)
    need = np.maximum(k_beta - state.ccount, 0)
    return np.where(state.active, np.minimum(state.res_down, need), 0)


@dataclass
class WarmupResult:
    slots: int
    outcome: str
    emergency_releases: int
    delivered: list
    useful: list
    planned: list
    q_requests: list
    k_achievement: list
    views: list
    bound: list

    @property
    def fail_open(self) -> bool:
        return self.outcome == FAIL_OPEN


def _apply_faults(state: SimState, stage: int) -> None:
    fs = state.config.fault_spec
    if fs is None:
        return
    for node, slot in fs.dropouts:
        if slot == stage and state.active[node]:
            mark_inactive(state, node, "dropout")
    if fs.progress_timeout > 0:
        last = np.maximum(state.sent_slot, state.recv_slot)
        stalled = state.active & (stage - np.maximum(last, 0) >= fs.progress_timeout) & (
            state.count < state.C)
        for v in np.flatnonzero(stalled):
            mark_inactive(state, int(v), "progress_timeout")


def _filter_carry(state: SimState, ws: WarmupState, carry: np.ndarray, ages: np.ndarray):
    """Drop carried directives that became infeasible (receiver has it, sender not eligible)."""
    if len(carry) == 0:
        return carry, ages
    owner_of = state.universe.owner_of
    keep = np.ones(len(carry), dtype=bool)
    for i, d in enumerate(carry):
        u, w, c = int(d["sender"]), int(d["receiver"]), int(d["chunk"])
        if state.claimed[w, c] or not state.claimed[u, c]:
            keep[i] = False
        elif owner_of[c] == u and c not in ws.elig_owner[u, :ws.elig_n[u]]:
            keep[i] = False
    return carry[keep], ages[keep]


def run_warmup(state: SimState, ws: WarmupState, on_stage=None, keep_views: bool = False) -> WarmupResult:
    """Run warm-up stages from ``state.slot`` until every active node reaches ``k_beta``.

    ``on_stage(view, executed)`` is called after each stage with the stage-start
    view and the executed directives; its return value is collected in
    ``bound``.  At least one stage always runs.
    """
    cfg = state.config
    k_beta = ws.k_beta
    degenerate = not np.any(state.active & (state.ccount < k_beta))
    carry = np.zeros(0, DIRECTIVE_DTYPE)
    ages = np.zeros(0, dtype=np.int64)
    res = WarmupResult(0, CONTINUE, 0, [], [], [], [], [], [], [])
    stage = state.slot
    while True:
        state.new_slot(stage)
        _apply_faults(state, stage)
        newly = (ws.cross_stage < 0) & (state.ccount >= k_beta)
        ws.cross_stage[newly] = stage
        refresh_owner_allowance(state, ws, degenerate)
        state.lagged_until = ws.lags
        start_demand = cover_demand(state, k_beta, degenerate)
        view0 = None
        if keep_views or on_stage is not None:
            view0 = _snapshot(make_view(state, ws, stage, start_demand))

        executed_all = []
        carry, ages = _filter_carry(state, ws, carry, ages)
        if len(carry):
            ex, deferred_c, status = step(state, carry, PHASE_WARMUP, ages + 1)
            executed_all.append(ex)
            order = np.lexsort((carry["chunk"], carry["receiver"], carry["sender"]))
            keep = (status >= 2) & (status <= 4)
            ages = (ages + 1)[order][keep]
            carry = deferred_c
        demand = cover_demand(state, k_beta, degenerate)
        view = make_view(state, ws, stage, demand)
        plan = schedule(cfg.scheduler, view, cfg.seed)
        if len(plan) == 0 and cfg.emergency_release:
            starving = np.flatnonzero(state.active & (demand > 0) & (state.ccount < k_beta))
            if len(starving) and release_emergency(state, ws, starving):
                view = make_view(state, ws, stage, demand)
                plan = schedule(cfg.scheduler, view, cfg.seed + 1)
                if view0 is not None:
                    view0 = _snapshot(make_view(state, ws, stage, start_demand), base=view0)
        ws.credit = view.credit
        res.planned.append(len(plan))
        res.q_requests.append(view.stats.copy())
        ex, deferred, status = step(state, plan, PHASE_WARMUP)
        executed_all.append(ex)
        if len(deferred):
            carry = np.concatenate([carry, deferred])
            ages = np.concatenate([ages, np.zeros(len(deferred), np.int64)])
        executed = np.concatenate(executed_all) if executed_all else np.zeros(0, DIRECTIVE_DTYPE)
        sends = int(state.up.sum() - state.res_up.sum())
        state.sends_per_slot.append(sends)
        res.delivered.append(len(executed))
        got = np.bincount(executed["receiver"], minlength=state.n)
        res.useful.append(int(np.minimum(got, start_demand).sum()))
        act = state.active
        res.k_achievement.append(float(np.mean(state.ccount[act] >= k_beta)) if act.any() else 1.0)
        if on_stage is not None:
            res.bound.append(on_stage(view0, executed))
        if keep_views:
            res.views.append(view0)
        outcome = warmup_complete(state, state.active, k_beta, cfg.s_max)
        stage += 1
        if outcome != CONTINUE:
            res.outcome = outcome
            break
    if len(carry):
        log.debug("dropping %d carried warm-up directives at phase switch", len(carry))
    newly = (ws.cross_stage < 0) & (state.ccount >= k_beta)
    ws.cross_stage[newly] = stage
    state.slot = stage
    res.slots = stage
    res.emergency_releases = ws.emergency_releases
    if res.fail_open:
        log.warning("warm-up hit the deadline at slot %d; failing open (unlinkability void)", stage)
    return res


@dataclass
class ViewSnapshot:
    """Frozen copy of the inputs a stage-network needs."""

    stage: int
    demand: np.ndarray
    res_up: np.ndarray
    res_down: np.ndarray
    send_ok: np.ndarray
    active: np.ndarray
    claimed: np.ndarray
    elig_owner: np.ndarray
    elig_n: np.ndarray
    emergency: np.ndarray
    credit: np.ndarray
    ratio: np.ndarray
    paced: bool
    owner_of: np.ndarray
    adj_ptr: np.ndarray
    adj_idx: np.ndarray


def _snapshot(view: StageView, base: ViewSnapshot | None = None) -> ViewSnapshot:
    st = view.state
    claimed = base.claimed if base is not None else st.claimed.copy()
    return ViewSnapshot(
        stage=view.stage, demand=view.demand.copy(), res_up=view.res_up.copy(),
        res_down=view.res_down.copy(), send_ok=view.send_ok.copy(), active=st.active.copy(),
        claimed=claimed, elig_owner=view.elig_owner.copy(), elig_n=view.elig_n.copy(),
        emergency=view.emergency.copy(), credit=view.credit.copy(), ratio=view.ratio.copy(),
        paced=view.paced, owner_of=st.universe.owner_of, adj_ptr=st.adj_ptr, adj_idx=st.adj_idx,
    )


def prepare_round(config: RoundConfig, state: SimState) -> WarmupState:
    """Spray and lag sampling; returns the warm-up state for ``state``."""
    spray = preround_spray(state.overlay, state.universe.K, config.R, config.seed)
    apply_spray(state, spray)
    ws = WarmupState.create(config, sample_lags(config.n, config.T_lag, config.seed))
    ws.sprayed = spray
    return ws


def write_warmup_summary(rows, path) -> None:
    """Rows are dicts with the summary columns."""
    cols = ["seed", "n", "m", "beta", "R", "T_lag", "warmup_slots", "emergency_releases", "spray_chunks"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
