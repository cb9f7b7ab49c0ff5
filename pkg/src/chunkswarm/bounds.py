"""Closed-form unlinkability bounds and their empirical counterparts.

``h`` is the non-owner mass a node must hold before its own chunks may leave,
``max(0, k_beta - K)``.  With at most ``kappa`` owner chunks eligible at a
time, a transfer from an honest sender is an owner chunk with probability at
most ``kappa / (kappa + h)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


def _check_kappa(kappa):
    if kappa < 1:
        raise ValueError("kappa must be at least 1")


def per_transfer_bound(kappa: int, k_beta: int, K: int) -> float:
    _check_kappa(kappa)
    h = max(0, k_beta - K)
    return kappa / (kappa + h)


def lead_probability(T_lag: int) -> float:
    """Chance a given neighbour starts strictly earlier under i.i.d. uniform lags."""
    if T_lag < 1:
        raise ValueError("T_lag must be at least 1")
    return (T_lag - 1) / (2 * T_lag)


def mixing_bound(kappa: int, h: int, mu: float, m: float, T_lag: int, q: float,
                 eps: float = 0.1) -> tuple[float, float]:
    """Posterior cap tightened by spray receipts and lag-induced relays, with failure probability.

    With ``q = 0`` no relay availability is credited and the deterministic
    gating bound is returned with zero failure probability.
    """
    _check_kappa(kappa)
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    gate = kappa / (kappa + max(0, h))
    if q == 0:
        return gate, 0.0
    p = lead_probability(T_lag)
    mass = (1.0 - eps) * (mu + m * p * q)
    eta = math.exp(-eps * eps * mu / 2.0) + math.exp(-eps * eps * m * p * q / 2.0)
    return min(gate, kappa / (kappa + mass)), eta


def multi_obs_exact(B: int, O: int, s: int) -> float:
    """Chance that ``s`` draws without replacement from ``B`` items hit one of ``O`` owner items."""
    if not 0 <= O <= B:
        raise ValueError("need 0 <= O <= B")
    if not 0 <= s <= B:
        raise ValueError("need 0 <= s <= B")
    total = math.comb(B, s)
    # integer true division rounds once, so the result is the correctly rounded ratio
    return (total - math.comb(B - O, s)) / total


def multi_obs_union(kappa: int, h: int, s: int) -> float:
    _check_kappa(kappa)
    if s < 0:
        raise ValueError("s must be non-negative")
    return min(1.0, s * kappa / (kappa + max(0, h)))


@dataclass(frozen=True)
class CollusionBounds:
    af: float
    af_mixing: tuple
    af_multi: float


def collusion_bounds(kappa: int, h: int, X: float, phi: float, rho: float, mu: float, m: float,
                     T_lag: int, q: float, s: int, eps: float = 0.1) -> CollusionBounds:
    """Caps when a coalition discounts the relay mass it recognises as its own."""
    _check_kappa(kappa)
    for name, v in (("phi", phi), ("rho", rho)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    gate = kappa / (kappa + max(0, h))
    keep = 1.0 - phi * rho
    af = min(gate, kappa / (kappa + keep * X))
    p = lead_probability(T_lag)
    mass = keep * (1.0 - eps) * (mu + m * p * q)
    eta = math.exp(-eps * eps * mu / 2.0) + math.exp(-eps * eps * m * p * q / 2.0)
    af_mix = min(gate, kappa / (kappa + mass))
    return CollusionBounds(af, (af_mix, eta), min(1.0, s * af))


def estimate_q(q_requests) -> float | None:
    """Share of (receiver, missing chunk) instances with a relay holder in the neighbourhood.

    ``q_requests`` holds one scheduler statistics row per stage; columns 2 and
    3 count missing instances and those with a non-owner holder.
    """
    a = np.asarray(q_requests, dtype=np.int64).reshape(-1, 4)
    total = int(a[:, 2].sum())
    return None if total == 0 else float(a[:, 3].sum() / total)


def q_per_stage(q_requests) -> np.ndarray:
    a = np.asarray(q_requests, dtype=np.int64).reshape(-1, 4)
    return np.divide(a[:, 3], a[:, 2], out=np.full(len(a), np.nan), where=a[:, 2] > 0)


@dataclass
class OwnerFraction:
    transfers: int
    owner: int
    emergency: int
    cap: float

    @property
    def fraction(self) -> float:
        return self.owner / self.transfers if self.transfers else 0.0

    @property
    def sigma(self) -> float:
        p = self.cap
        return math.sqrt(p * (1 - p) / self.transfers) if self.transfers else 0.0

    @property
    def within_cap(self) -> bool:
        return self.fraction <= self.cap + 3 * self.sigma


def owner_fraction(state, cross_stage, k_beta: int, kappa: int, honest=None) -> OwnerFraction:
    """Owner share of warm-up deliveries by honest senders after they crossed the threshold.

    Emergency releases are counted separately and left out of the share.
    """
    from .engine import PHASE_WARMUP
    from .overlay import EMERGENCY

    t = state.transfers()
    uni = state.universe
    honest = np.ones(state.n, dtype=bool) if honest is None else np.asarray(honest, dtype=bool)
    snd = t["sender"]
    sel = (t["phase"] == PHASE_WARMUP) & (t["ok"] == 1) & honest[snd]
    sel &= (cross_stage[snd] >= 0) & (t["stage"] >= cross_stage[snd])
    emerg = sel & ((t["flags"] & EMERGENCY) != 0)
    sel &= ~emerg
    own = sel & (uni.owner_of[t["chunk"]] == snd)
    Kmin = int(uni.K.min())
    return OwnerFraction(int(sel.sum()), int(own.sum()), int(emerg.sum()),
                         per_transfer_bound(kappa, k_beta, Kmin))


@dataclass
class TraceExtrema:
    B_min: int  # smallest eligible buffer at a post-threshold serving instant
    O_max: int  # largest eligible owner count at such an instant
    s_max: int  # most post-threshold transfers one receiver got from one sender


def trace_extrema(state, cross_stage, kappa: int, honest=None) -> TraceExtrema:
    """Worst-case buffer composition over honest post-threshold warm-up sends.

    The eligible buffer at stage ``t`` is the relay chunks a sender received
    before ``t`` plus its ``kappa`` eligible owner chunks.
    """
    from .engine import PHASE_WARMUP

    t = state.transfers()
    honest = np.ones(state.n, dtype=bool) if honest is None else np.asarray(honest, dtype=bool)
    snd, rcv, stage = t["sender"], t["receiver"], t["stage"]
    ok = t["ok"] == 1
    sel = (t["phase"] == PHASE_WARMUP) & ok & honest[snd]
    sel &= (cross_stage[snd] >= 0) & (stage >= cross_stage[snd])
    if not sel.any():
        return TraceExtrema(0, 0, 0)
    got = ok & (state.universe.owner_of[t["chunk"]] != rcv)
    order = np.lexsort((stage[got], rcv[got]))
    r_node, r_stage = rcv[got][order], stage[got][order]
    lo = np.searchsorted(r_node, snd[sel], side="left")
    held_before = np.array([np.searchsorted(r_stage[a:b], s, side="left") for a, b, s in
                            zip(lo, np.searchsorted(r_node, snd[sel], side="right"), stage[sel])])
    pairs = snd[sel].astype(np.int64) * state.n + rcv[sel]
    return TraceExtrema(int(held_before.min()) + kappa, kappa, int(np.bincount(pairs).max()))


BOUNDS_COLUMNS = ["kappa", "k_beta", "K", "h", "mu", "m", "T_lag", "q", "eps", "per_transfer", "mixing",
                  "eta", "eta_valid", "multi_exact", "multi_union", "phi", "rho", "coalition", "coalition_mixing",
                  "coalition_multi"]


def bounds_row(kappa, k_beta, K, mu, m, T_lag, q, eps, s, B, O, phi, rho, X) -> dict:
    h = max(0, k_beta - K)
    mix, eta = mixing_bound(kappa, h, mu, m, T_lag, q, eps)
    cb = collusion_bounds(kappa, h, X, phi, rho, mu, m, T_lag, q, s, eps)
    return {
        "kappa": kappa, "k_beta": k_beta, "K": K, "h": h, "mu": mu, "m": m, "T_lag": T_lag, "q": q,
        "eps": eps, "per_transfer": per_transfer_bound(kappa, k_beta, K), "mixing": mix,
        "eta": eta, "eta_valid": eta < 1.0, "multi_exact": multi_obs_exact(B, O, s), "multi_union": multi_obs_union(kappa, h, s),
        "phi": phi, "rho": rho, "coalition": cb.af, "coalition_mixing": cb.af_mixing[0],
        "coalition_multi": cb.af_multi,
    }


def write_bounds_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BOUNDS_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


__all__ = [
    "per_transfer_bound", "lead_probability", "mixing_bound", "multi_obs_exact", "multi_obs_union",
    "CollusionBounds", "collusion_bounds", "estimate_q", "q_per_stage", "OwnerFraction",
    "owner_fraction", "TraceExtrema", "trace_extrema", "BOUNDS_COLUMNS", "bounds_row", "write_bounds_csv",
]
