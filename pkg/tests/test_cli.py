import json

from chunkswarm.cli import EXIT_AUDIT, EXIT_CONFIG, main, parse_sweep
from chunkswarm.config import ConfigError

import pytest


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_run_single(tmp_path, capsys):
    cfg = write(tmp_path, "n: 20\nm: 4\nK: 30\n")
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--seed", "2", "--out", str(out), "--audit", "verify"]) == 0
    assert "audit accept" in capsys.readouterr().out
    assert {p.name for p in out.iterdir()} == {"metrics.csv", "asr.csv", "k_achievement.csv",
                                               "bound.csv", "bounds.csv", "summary.txt"}


def test_run_sweep(tmp_path):
    cfg = write(tmp_path, json.dumps({"n": 20, "m": 4, "K": 30}), "c.json")
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--sweep", "R=0.1,0.3", "--attacks", "sequential",
                 "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("point,") and len(lines) == 3


def test_config_errors(tmp_path, capsys):
    assert main(["run", "--config", write(tmp_path, "n: 20\nbeta: 3\n")]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    cfg = write(tmp_path, "n: 20\nm: 4\nK: 30\n", "ok.yaml")
    assert main(["run", "--config", cfg, "--attacks", "psychic", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", cfg, "--sweep", "tau=1"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_audit_rejection_exit(tmp_path, monkeypatch):
    from chunkswarm import harness
    from chunkswarm.overlay import Verdict

    monkeypatch.setattr(harness, "verify_round_log", lambda *a: Verdict(False, "cap", "forced"))
    cfg = write(tmp_path, "n: 20\nm: 4\nK: 30\n")
    assert main(["run", "--config", cfg, "--audit", "verify", "--out", str(tmp_path / "o")]) == EXIT_AUDIT


def test_parse_sweep():
    assert parse_sweep("beta=0.05, 0.1") == ("beta", [0.05, 0.1])
    with pytest.raises(ConfigError):
        parse_sweep("m=a")
