"""Experiment driver: full-round runs, sweeps and CSV reports.

A run executes spray, lag sampling, warm-up scheduling, swarming, deadline
aggregation and, optionally, an audit of the revealed round log, then collects
the metrics below.  Durations are simulated slots, never wall-clock time.

Sweep seed policy: replicate ``r`` of every sweep point uses seed
``derive_seed(base_seed, r)``, so all points share one seed set and differ only
in the swept parameter.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .attacks import (ATTACKS, asr, collude, pick_coalition, round_observations, run_attacks,
                      warmup_round_observations)
from .bounds import BOUNDS_COLUMNS, bounds_row, estimate_q, owner_fraction, trace_extrema
from .config import ConfigError, RoundConfig
from .engine import (directive_log, init_state, observations, utilization,
                     write_observations_csv)
from .maxflow import stage_bound
from .overlay import RoundLog, commit_seed, config_digest, verify_round_log
from .swarm import aggregate_all, checksum, run_bittorrent, synthetic_updates, write_aggregation_csv
from .warmup import prepare_round, run_warmup

log = logging.getLogger(__name__)

SWEEP_AXES = ("n", "m", "beta", "R", "attackers")
EPS_GRID = (0.05, 0.1, 0.2, 0.5)

# defence presets for the privacy ablation; "none" also disables the cover threshold
DEFENSES = {
    "none": dict(beta=1e-9, R=0.0, T_lag=1),
    "tl": dict(R=0.0),
    "pr": dict(T_lag=1),
    "both": {},
}


def with_defenses(config: RoundConfig, name: str) -> RoundConfig:
    """``config`` with the preset applied; presets other than none keep its beta, R and T_lag otherwise."""
    try:
        return config.replace(**DEFENSES[name])
    except KeyError:
        raise ConfigError(f"unknown defence preset {name!r}; choose from {sorted(DEFENSES)}") from None


@dataclass
class MetricsReport:
    seed: int
    warmup_slots: int
    warmup_share: float
    round_slots: int
    utilization: float
    round_utilization: float
    k_achievement_curve: list
    asr_table: dict  # warm-up deliveries only
    bound_comparison: list
    emergency_releases: int
    fail_open: bool
    q: float | None = None
    owner_fraction: float = 0.0
    owner_cap: float = 0.0
    owner_transfers: int = 0
    collusion: dict = field(default_factory=dict)
    audit: str = "skipped"
    attackers: int = 0
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    bounds: list = field(default_factory=list)
    asr_table_all: dict = field(default_factory=dict)  # swarming deliveries included
    artifacts: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        """Flat scalar summary used by the metrics CSV."""
        r = {
            "seed": self.seed, "n": self.config.get("n"), "m": self.config.get("m"),
            "beta": self.config.get("beta"), "R": self.config.get("R"),
            "T_lag": self.config.get("T_lag"), "scheduler": self.config.get("scheduler"),
            "attackers": self.attackers, "warmup_slots": self.warmup_slots, "round_slots": self.round_slots,
            "warmup_share": self.warmup_share, "utilization": self.utilization,
            "round_utilization": self.round_utilization,
            "emergency_releases": self.emergency_releases, "fail_open": int(self.fail_open),
            "q": "" if self.q is None else self.q, "owner_fraction": self.owner_fraction,
            "owner_cap": self.owner_cap, "audit": self.audit,
        }
        for a, v in sorted(self.asr_table.items()):
            r[f"asr_max_{a}"] = v["max"]
            r[f"asr_mean_{a}"] = v["mean"]
        for a, v in sorted(self.asr_table_all.items()):
            r[f"asr_all_max_{a}"] = v["max"]
            r[f"asr_all_mean_{a}"] = v["mean"]
        return r


def run_experiment(config: RoundConfig, attacks="all", attackers: int = 0, audit: bool = False,
                   bound: bool = False, bittorrent: bool = True, keep_artifacts: bool = False,
                   phi: float = 1.0) -> MetricsReport:
    """One full round for ``config``; deterministic in ``config.seed``."""
    config.validate_feasible()
    names = _attack_names(attacks)
    state = init_state(config)
    ws = prepare_round(config, state)
    total_up = float(state.up.sum())

    def on_stage(view, executed):
        b = stage_bound(view)
        got = np.bincount(executed["receiver"], minlength=state.n)
        return b, int(np.minimum(got, view.demand).sum())

    res = run_warmup(state, ws, on_stage=on_stage if bound else None)
    warm = res.slots
    util = utilization(state.sends_per_slot, state.up, warm)
    end = run_bittorrent(state) if bittorrent else warm
    round_util = utilization(state.sends_per_slot, state.up, max(end, 1))

    obs_all = observations(state)
    obs = warmup_round_observations(obs_all, config.n)
    truth = np.argsort(state.pseudonym)
    owner_of = state.universe.owner_of
    asr_table = {}
    if names:
        outs = run_attacks(obs, owner_of, config.n, names)
        for a in names:
            s = asr(outs[a], truth)
            asr_table[a] = {"max": s["max"], "mean": s["mean"]}
    asr_table_all = {}
    if names and bittorrent:
        outs = run_attacks(round_observations(obs_all, config.n), owner_of, config.n, names)
        for a in names:
            s = asr(outs[a], truth)
            asr_table_all[a] = {"max": s["max"], "mean": s["mean"]}

    collusion = {}
    if attackers:
        coal = pick_coalition(config.n, attackers, config.seed, phi)
        for a in names or ["sequential"]:
            c = collude(obs, owner_of, coal, truth, a)
            collusion[a] = {"size": attackers, "phi": phi, "any_success": c.any_success,
                            "per_attacker_mean": c.per_attacker_mean,
                            "per_attacker_max": c.per_attacker_max, "pooled": c.pooled_asr}

    honest = np.ones(config.n, dtype=bool)
    if config.fault_spec is not None:
        honest[list(config.fault_spec.byzantine)] = False
    of = owner_fraction(state, ws.cross_stage, ws.k_beta, config.kappa, honest)

    q = estimate_q(res.q_requests)
    ext = trace_extrema(state, ws.cross_stage, config.kappa, honest)
    deg = float(np.diff(state.adj_ptr).mean())
    mu = state.n_spray / config.n
    rho = attackers / (config.n - 1) if attackers else 0.0
    Kmin = int(state.universe.K.min())
    h = max(0, ws.k_beta - Kmin)
    # without post-threshold sends, fall back to the buffer a sender holds at the threshold
    B, O, s_obs = (ext.B_min, ext.O_max, ext.s_max) if ext.s_max else (h + config.kappa, config.kappa, 1)
    bounds = [bounds_row(config.kappa, ws.k_beta, Kmin, mu, deg, config.T_lag, q or 0.0, eps,
                         min(s_obs, B), B, O, phi, rho, h) for eps in EPS_GRID]

    aggregates = {}
    if bittorrent:
        updates = synthetic_updates(config.n, config.update_length, config.seed)
        agg = aggregate_all(state, updates)
        aggregates = {v: (len(m), checksum(a) if a is not None else "") for v, (m, a) in agg.items()}

    verdict = "skipped"
    rlog = None
    if audit or keep_artifacts:
        rlog = RoundLog(commit_seed(config.seed), config.n, config.m, config_digest(config),
                        directive_log(state), config.seed)
    if audit:
        v = verify_round_log(rlog.seed_commit, config.seed, rlog, config)
        verdict = "accept" if v.accept else f"reject:{v.reason}"

    bound_rows = []
    if bound:
        for i, (b, h) in enumerate(res.bound):
            bound_rows.append((i, b, h, b / total_up, h / total_up))

    report = MetricsReport(
        seed=config.seed, warmup_slots=warm, warmup_share=warm / end if end else 0.0,
        round_slots=end, utilization=util, round_utilization=round_util,
        k_achievement_curve=list(enumerate(res.k_achievement)), asr_table=asr_table,
        bound_comparison=bound_rows, emergency_releases=res.emergency_releases,
        fail_open=res.fail_open, q=q, owner_fraction=of.fraction,
        owner_cap=of.cap, owner_transfers=of.transfers, collusion=collusion, audit=verdict,
        attackers=attackers, aggregates=aggregates, config=config.to_mapping(), bounds=bounds,
        asr_table_all=asr_table_all,
    )
    if keep_artifacts:
        report.artifacts = {"observations": obs_all, "round_log": rlog, "state": state,
                            "warmup": res, "warmup_state": ws}
    return report


def _attack_names(attacks) -> list:
    if attacks in (None, "none"):
        return []
    if attacks == "all":
        return list(ATTACKS)
    names = [a.strip() for a in attacks.split(",")] if isinstance(attacks, str) else list(attacks)
    bad = [a for a in names if a not in ATTACKS]
    if bad:
        raise ConfigError(f"unknown attacks {bad}; choose from {list(ATTACKS)}")
    return names


# ---------------------------------------------------------------------------
# sweeps


def replicate_seeds(base_seed: int, count: int) -> list[int]:
    return [rng.derive_seed(base_seed, r) for r in range(count)]


def _point(args):
    config, kw = args
    return run_experiment(config, **kw)


def run_sweep(base: RoundConfig, axis: str, values, seeds: int = 1, workers: int = 1,
              **kw) -> list[MetricsReport]:
    """One report per (value, replicate), values outer, replicates inner."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"cannot sweep {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    jobs = []
    for v in values:
        for s in replicate_seeds(base.seed, seeds):
            if axis == "attackers":
                jobs.append((base.replace(seed=s), dict(kw, attackers=int(v))))
            else:
                cast = float if axis in ("beta", "R") else int
                jobs.append((base.replace(seed=s, **{axis: cast(v)}), dict(kw)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_point, jobs))
    return [_point(j) for j in jobs]


# ---------------------------------------------------------------------------
# emission


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ""
    return v


def _write_rows(path: Path, rows: list, columns: list) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


METRIC_COLUMNS = ["seed", "n", "m", "beta", "R", "T_lag", "scheduler", "attackers", "warmup_slots",
                  "round_slots", "warmup_share", "utilization", "round_utilization", "emergency_releases",
                  "fail_open", "q", "owner_fraction", "owner_cap", "audit"]


def emit_report(reports, path, axis: str | None = None) -> dict:
    """Write per-family CSVs and a text summary for one report or a sweep; returns file paths."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    attacks = sorted({a for r in reports for a in r.asr_table}) or list(ATTACKS)
    cols = METRIC_COLUMNS + [f"asr_{k}_{a}" for a in attacks for k in ("max", "mean")]
    if any(r.asr_table_all for r in reports):
        cols += [f"asr_all_{k}_{a}" for a in attacks for k in ("max", "mean")]
    if axis:
        cols = ["point"] + cols
    files = {}

    rows = []
    for r in reports:
        row = r.row()
        if axis:
            row["point"] = r.attackers if axis == "attackers" else r.config.get(axis)
        rows.append(row)
    files["metrics"] = out / "metrics.csv"
    _write_rows(files["metrics"], rows, cols)

    asr_rows = []
    for r in reports:
        c = r.config
        for scope, table in (("warmup", r.asr_table), ("round", r.asr_table_all)):
            for a, v in sorted(table.items()):
                asr_rows.append({"seed": r.seed, "attack": a, "scope": scope, "defenses": _defense_label(c),
                                 "n": c["n"], "m": c["m"], "beta": c["beta"], "R": c["R"], "attackers": 0,
                                 "phi": "", "asr_max": v["max"], "asr_mean": v["mean"]})
        for a, v in sorted(r.collusion.items()):
            asr_rows.append({"seed": r.seed, "attack": a, "scope": "warmup", "defenses": _defense_label(c),
                             "n": c["n"], "m": c["m"], "beta": c["beta"], "R": c["R"],
                             "attackers": v.get("size", ""), "phi": v.get("phi", ""),
                             "asr_max": v["any_success"], "asr_mean": v["per_attacker_mean"]})
    files["asr"] = out / "asr.csv"
    _write_rows(files["asr"], asr_rows, ["seed", "attack", "scope", "defenses", "n", "m", "beta", "R",
                                         "attackers", "phi", "asr_max", "asr_mean"])

    files["k_achievement"] = out / "k_achievement.csv"
    _write_rows(files["k_achievement"],
                [{"seed": r.seed, "slot": s, "ratio": k} for r in reports for s, k in r.k_achievement_curve],
                ["seed", "slot", "ratio"])

    files["bound"] = out / "bound.csv"
    _write_rows(files["bound"],
                [{"seed": r.seed, "stage": s, "bound_chunks": b, "heuristic_chunks": h,
                  "utilization_bound": ub, "utilization_heuristic": uh}
                 for r in reports for s, b, h, ub, uh in r.bound_comparison],
                ["seed", "stage", "bound_chunks", "heuristic_chunks", "utilization_bound",
                 "utilization_heuristic"])

    files["bounds"] = out / "bounds.csv"
    _write_rows(files["bounds"], [{"seed": r.seed, **b} for r in reports for b in r.bounds],
                ["seed"] + BOUNDS_COLUMNS)

    files["summary"] = out / "summary.txt"
    with open(files["summary"], "w") as fh:
        fh.write(summary_text(reports, axis))
    return files


def _defense_label(c: dict) -> str:
    if c.get("beta", 0) < 1e-6:
        return "none"
    pr, tl = c.get("R", 0) > 0, c.get("T_lag", 1) > 1
    return {(True, True): "both", (True, False): "pr", (False, True): "tl", (False, False): "gate"}[(pr, tl)]


def summary_text(reports, axis: str | None = None) -> str:
    if not reports:
        return "no runs\n"
    lines = []
    for r in reports:
        head = f"seed {r.seed}"
        if axis:
            head += f" {axis}={r.attackers if axis == 'attackers' else r.config.get(axis)}"
        asr_s = " ".join(f"{a}={v['max']:.3f}" for a, v in sorted(r.asr_table.items()))
        lines.append(f"{head}: warm-up {r.warmup_slots} slots ({r.warmup_share:.3f} of "
                     f"{r.round_slots}), utilization {r.utilization:.3f}, "
                     f"emergency releases {r.emergency_releases}, fail-open {r.fail_open}, "
                     f"audit {r.audit}" + (f", max ASR {asr_s}" if asr_s else ""))
    return "\n".join(lines) + "\n"


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_artifacts(report: MetricsReport, path) -> dict:
    """Observation log, round log, aggregation CSV and config echo for a kept run."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    st = report.artifacts["state"]
    files = {"observations": out / "observations.csv", "round_log": out / "round_log.txt",
             "aggregation": out / "aggregation.csv", "config": out / "config.json"}
    write_observations_csv(report.artifacts["observations"], st.universe, files["observations"])
    files["round_log"].write_text(report.artifacts["round_log"].to_text(st.universe))
    updates = synthetic_updates(st.n, st.config.update_length, st.config.seed)
    write_aggregation_csv(aggregate_all(st, updates), files["aggregation"])
    files["config"].write_text(json.dumps(report.config, sort_keys=True, indent=1) + "\n")
    return files


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


__all__ = [
    "MetricsReport", "run_experiment", "run_sweep", "emit_report", "replicate_seeds",
    "with_defenses", "DEFENSES", "SWEEP_AXES", "summary_text", "read_metrics_csv",
    "write_run_artifacts", "default_workers",
]
