import numpy as np
import pytest

from chunkswarm.config import ConfigError, RoundConfig
from chunkswarm.engine import utilization
from chunkswarm.harness import (DEFENSES, emit_report, read_metrics_csv, replicate_seeds,
                                run_experiment, run_sweep, summary_text, with_defenses,
                                write_run_artifacts)
from helpers import SMALL


@pytest.fixture(scope="module")
def report():
    return run_experiment(RoundConfig(**SMALL, seed=1), audit=True, bound=True, attackers=3,
                          keep_artifacts=True)


def test_report_fields(report):
    assert report.audit == "accept"
    assert 0 < report.warmup_slots < report.round_slots
    assert report.warmup_share == report.warmup_slots / report.round_slots
    assert set(report.asr_table) == {"sequential", "amount_greedy", "clustering"}
    assert report.collusion["sequential"]["size"] == 3
    assert len(report.bound_comparison) == report.warmup_slots
    assert all(h <= b for _, b, h, _, _ in report.bound_comparison)
    assert not report.fail_open
    assert set(report.asr_table_all) == set(report.asr_table)
    assert {b["eps"] for b in report.bounds} == {0.05, 0.1, 0.2, 0.5}


def test_metrics_recomputed_from_traces(report):
    st = report.artifacts["state"]
    assert report.utilization == utilization(st.sends_per_slot, st.up, report.warmup_slots)
    t = st.transfers()
    warm = (t["phase"] == 1) & (t["ok"] == 1) & ((t["flags"] & 2) == 0)
    assert int(warm.sum()) == sum(st.sends_per_slot[:report.warmup_slots]) - \
        int(((t["phase"] == 1) & (t["ok"] == 0)).sum())
    curve = [k for _, k in report.k_achievement_curve]
    assert curve[-1] == 1.0 and (np.diff(curve) >= 0).all()


def test_invalid_inputs_rejected():
    with pytest.raises(ConfigError):
        RoundConfig.from_mapping({**SMALL, "beta": 1.5})
    with pytest.raises(ConfigError):
        run_experiment(RoundConfig(**SMALL), attacks="bogus", bittorrent=False)


def test_defense_presets():
    base = RoundConfig(**SMALL)
    assert with_defenses(base, "none").R == 0.0 and with_defenses(base, "none").T_lag == 1
    assert with_defenses(base, "tl").T_lag == base.T_lag and with_defenses(base, "tl").R == 0
    assert with_defenses(base, "pr").T_lag == 1 and with_defenses(base, "pr").R == base.R
    assert with_defenses(base, "both") == base
    assert set(DEFENSES) == {"none", "tl", "pr", "both"}
    with pytest.raises(ConfigError):
        with_defenses(base, "all")


def test_sweep_seed_policy():
    base = RoundConfig(**SMALL, seed=4)
    reps = run_sweep(base, "m", [3, 5], seeds=2, attacks="none", bittorrent=False)
    assert [r.config["m"] for r in reps] == [3, 3, 5, 5]
    assert [r.seed for r in reps] == replicate_seeds(4, 2) * 2
    with pytest.raises(ConfigError):
        run_sweep(base, "tau", [1])
    with pytest.raises(ConfigError):
        run_sweep(base, "m", [])
    att = run_sweep(base, "attackers", [2], attacks="sequential", bittorrent=False)
    assert att[0].attackers == 2


def test_emit_roundtrip_and_determinism(tmp_path, report):
    files = emit_report(report, tmp_path / "a")
    rows = read_metrics_csv(files["metrics"])
    assert int(rows[0]["warmup_slots"]) == report.warmup_slots
    assert float(rows[0]["utilization"]) == report.utilization
    assert float(rows[0]["asr_max_sequential"]) == report.asr_table["sequential"]["max"]
    again = run_experiment(RoundConfig(**SMALL, seed=1), audit=True, bound=True, attackers=3)
    files2 = emit_report(again, tmp_path / "b")
    for k in files:
        assert files[k].read_bytes() == files2[k].read_bytes()
    assert "warm-up" in summary_text([report])


def test_empty_sweep_header_only(tmp_path):
    files = emit_report([], tmp_path)
    for k in ("metrics", "asr", "k_achievement", "bound"):
        assert len(files[k].read_text().splitlines()) == 1
    assert files["summary"].read_text() == "no runs\n"


def test_io_error_has_path(tmp_path, report):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_report(report, f / "sub")


def test_run_artifacts(tmp_path, report):
    files = write_run_artifacts(report, tmp_path)
    assert files["round_log"].read_text().startswith("# hash=sha256")
    assert len(files["observations"].read_text().splitlines()) > 1
