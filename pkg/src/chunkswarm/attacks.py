"""Observation-only attribution attacks and attribution success rate.

Attacks see only observation records: slot, observer, sender pseudonym and
chunk id, where the chunk's owner label stands in for its update descriptor.
For every sender pseudonym an observer received from, an attack outputs one
guessed descriptor (or none).  A guess is correct when the descriptor is the
sender's own update, i.e. the attacker has linked the pseudonym to its source.

Records are taken in log order, which is slot order; records sharing a slot
keep the engine's execution order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng

NO_GUESS = -1


@dataclass
class AttackOutput:
    """Guesses of one attacker (or pooled coalition) per observed sender pseudonym."""

    attacker: tuple
    pseudonyms: np.ndarray
    guesses: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.pseudonyms)


@dataclass(frozen=True)
class Coalition:
    members: tuple
    phi: float = 1.0

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("coalition needs at least one member")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")


def _by_sender(obs, owner_of):
    """Yield ``(pseudonym, descriptor ids in arrival order)`` per sender pseudonym."""
    if len(obs) == 0:
        return
    ps = obs["sender_pseudonym"]
    order = np.argsort(ps, kind="stable")
    ps_sorted = ps[order]
    desc = owner_of[obs["chunk"][order]]
    cuts = np.flatnonzero(np.diff(ps_sorted)) + 1
    for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(order)]):
        yield int(ps_sorted[lo]), desc[lo:hi]


def _run(obs, owner_of, attacker, decide) -> AttackOutput:
    ps, gs, cs = [], [], []
    for p, desc in _by_sender(obs, owner_of):
        ps.append(p)
        gs.append(decide(desc))
        cs.append(len(desc))
    return AttackOutput(tuple(attacker), np.array(ps, dtype=np.int64), np.array(gs, dtype=np.int64),
                        np.array(cs, dtype=np.int64))


def _attacker_of(obs):
    return tuple(int(v) for v in np.unique(obs["observer"]))


def attack_sequential(obs, owner_of, attacker=None) -> AttackOutput:
    """The first chunk received from each sender names the sender's descriptor."""
    attacker = _attacker_of(obs) if attacker is None else attacker
    return _run(obs, owner_of, attacker, lambda d: int(d[0]))


def attack_amount_greedy(obs, owner_of, attacker=None) -> AttackOutput:
    """Most frequent descriptor among the first half (rounded up) of each sender's transfers."""
    attacker = _attacker_of(obs) if attacker is None else attacker

    def decide(desc):
        early = desc[:(len(desc) + 1) // 2]
        vals, counts = np.unique(early, return_counts=True)
        return int(vals[np.flatnonzero(counts == counts.max())[0]])

    return _run(obs, owner_of, attacker, decide)


def attack_clustering(obs, owner_of, attacker=None) -> AttackOutput:
    """Rank-weighted match: descriptor maximising the sum of ``1/(1 + arrival rank)``."""
    attacker = _attacker_of(obs) if attacker is None else attacker

    def decide(desc):
        w = 1.0 / (1.0 + np.arange(len(desc)))
        vals, inv = np.unique(desc, return_inverse=True)
        score = np.bincount(inv, weights=w)
        return int(vals[np.flatnonzero(score == score.max())[0]])

    return _run(obs, owner_of, attacker, decide)


ATTACKS = {
    "sequential": attack_sequential,
    "amount_greedy": attack_amount_greedy,
    "clustering": attack_clustering,
}


# ---------------------------------------------------------------------------
# scoring


def correct(output: AttackOutput, true_node) -> np.ndarray:
    """Per-guess correctness; ``true_node[p]`` is the node behind pseudonym ``p``."""
    true_node = np.asarray(true_node)
    return (output.guesses != NO_GUESS) & (output.guesses == true_node[output.pseudonyms])


def asr(outputs, true_node) -> dict:
    """Per-receiver success rate with max and mean over receivers that made decisions."""
    per = {}
    for out in outputs:
        if len(out) == 0:
            continue
        per[out.attacker] = float(correct(out, true_node).mean())
    vals = np.array(list(per.values()))
    return {
        "per_receiver": per,
        "max": float(vals.max()) if len(vals) else float("nan"),
        "mean": float(vals.mean()) if len(vals) else float("nan"),
    }


def warmup_round_observations(obs, n: int):
    """Warm-up deliveries under round pseudonyms (spray tunnels and swarming excluded)."""
    from .engine import PHASE_WARMUP

    return obs[(obs["phase"] == PHASE_WARMUP) & (obs["sender_pseudonym"] < n)]


def round_observations(obs, n: int):
    """Every delivery under round pseudonyms, swarming included (spray tunnels excluded)."""
    return obs[obs["sender_pseudonym"] < n]


def run_attacks(obs, owner_of, n: int, names=None, observers=None) -> dict:
    """Each named attack run separately by every observer; returns outputs per attack."""
    names = list(ATTACKS) if names is None else list(names)
    observers = range(n) if observers is None else observers
    ps_obs = {}
    order = np.argsort(obs["observer"], kind="stable")
    o_sorted = obs[order]
    cuts = np.searchsorted(o_sorted["observer"], np.arange(n + 1))
    for v in observers:
        ps_obs[v] = o_sorted[cuts[v]:cuts[v + 1]]
    return {a: [ATTACKS[a](ps_obs[v], owner_of, (v,)) for v in observers] for a in names}


# ---------------------------------------------------------------------------
# collusion


def pick_coalition(n: int, size: int, seed: int, phi: float = 1.0) -> Coalition:
    g = rng.stream(seed, rng.ATTACKERS, size)
    return Coalition(tuple(int(v) for v in np.sort(g.choice(n, size=size, replace=False))), phi)


@dataclass
class CollusionResult:
    pooled: AttackOutput
    members: list
    any_success: float
    per_attacker_mean: float
    per_attacker_max: float
    pooled_asr: float
    rho: np.ndarray
    X: np.ndarray
    X_eff: np.ndarray


def collude(obs, owner_of, coalition: Coalition, true_node, attack: str = "sequential",
            relay_origin=None) -> CollusionResult:
    """Pool the members' observations, score members and the pool, and filter masses.

    Targets are sender pseudonyms of non-members.  ``any_success`` is the
    fraction of targets seen by the coalition that at least one member links
    correctly on its own observations.  ``relay_origin`` is an optional
    ``(sender, origin)`` pair of arrays over the honest senders' relay
    deliveries; it yields each sender's coalition-origin fraction ``rho``, its
    relay mass ``X`` and the filtered mass ``(1 - phi * rho) X``.
    """
    fn = ATTACKS[attack]
    true_node = np.asarray(true_node)
    members = np.array(coalition.members)
    member_ps = np.flatnonzero(np.isin(true_node, members))
    pooled_obs = obs[np.isin(obs["observer"], members)]
    pooled_obs = pooled_obs[~np.isin(pooled_obs["sender_pseudonym"], member_ps)]
    pooled_obs = pooled_obs[np.argsort(pooled_obs["slot"], kind="stable")]
    pooled = fn(pooled_obs, owner_of, tuple(coalition.members))

    outs = []
    hit = {}
    for v in coalition.members:
        o = fn(pooled_obs[pooled_obs["observer"] == v], owner_of, (v,))
        outs.append(o)
        ok = correct(o, true_node)
        for p, k in zip(o.pseudonyms, ok):
            hit[int(p)] = hit.get(int(p), False) or bool(k)
    rates = [float(correct(o, true_node).mean()) for o in outs if len(o)]

    n = len(true_node)
    rho = np.zeros(n)
    X = np.zeros(n)
    if relay_origin is not None:
        snd, origin = (np.asarray(a) for a in relay_origin)
        X = np.bincount(snd, minlength=n).astype(float)
        from_coal = np.bincount(snd[np.isin(origin, members)], minlength=n).astype(float)
        rho = np.divide(from_coal, X, out=np.zeros(n), where=X > 0)
    return CollusionResult(
        pooled=pooled, members=outs,
        any_success=float(np.mean(list(hit.values()))) if hit else float("nan"),
        per_attacker_mean=float(np.mean(rates)) if rates else float("nan"),
        per_attacker_max=float(np.max(rates)) if rates else float("nan"),
        pooled_asr=float(correct(pooled, true_node).mean()) if len(pooled) else float("nan"),
        rho=rho, X=X, X_eff=(1.0 - coalition.phi * rho) * X,
    )


def write_asr_csv(rows, path) -> None:
    """Rows are dicts keyed by the ASR CSV columns."""
    cols = ["seed", "attack", "defenses", "n", "m", "beta", "R", "attackers", "phi", "asr_max", "asr_mean"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r.get(k), float) else r.get(k)) for k in cols})


__all__ = [
    "AttackOutput", "Coalition", "CollusionResult", "ATTACKS", "attack_sequential",
    "attack_amount_greedy", "attack_clustering", "correct", "asr", "run_attacks",
    "warmup_round_observations", "round_observations", "pick_coalition", "collude", "write_asr_csv", "NO_GUESS",
]
