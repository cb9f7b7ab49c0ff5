import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkswarm.config import RoundConfig
from chunkswarm.engine import directive_log
from chunkswarm.harness import run_experiment
from chunkswarm.overlay import (Overlay, OverlayError, RoundLog, commit_seed, config_digest,
                                generate_overlay, reveal_matches, tamper_log, verify_round_log)
from helpers import SMALL


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 60), st.integers(1, 12), st.integers(0, 2**32))
def test_overlay_min_degree_connected_simple(n, m, seed):
    if m >= n:
        with pytest.raises(OverlayError):
            generate_overlay(n, m, seed)
        return
    ov = generate_overlay(n, m, seed)
    A = ov.matrix()
    assert (A == A.T).all() and not A.diagonal().any()
    assert ov.min_degree >= m
    assert ov.is_connected()
    assert ov == generate_overlay(n, m, seed)


def test_average_degree_band():
    ov = generate_overlay(100, 10, 1)
    assert 10 <= float(ov.avg_degree) <= 21


def test_from_edges_and_csr():
    ov = Overlay.from_edges(4, [(0, 1), (1, 2), (1, 2)])
    ptr, idx = ov.csr()
    assert list(ptr) == [0, 1, 3, 4, 4]
    assert ov.neighbors(1) == (0, 2)
    assert not ov.is_connected()
    with pytest.raises(OverlayError):
        Overlay.from_edges(2, [(1, 1)])


def test_commit_reveal():
    c = commit_seed(42)
    assert reveal_matches(c, 42) and not reveal_matches(c, 43)
    with pytest.raises(ValueError):
        commit_seed(-1)


@pytest.fixture(scope="module")
def honest():
    cfg = RoundConfig(**SMALL, seed=11)
    rep = run_experiment(cfg, attacks="none", keep_artifacts=True)
    return cfg, rep.artifacts["round_log"], rep.artifacts["state"]


def test_honest_log_accepted(honest):
    cfg, log, _ = honest
    assert verify_round_log(log.seed_commit, cfg.seed, log, cfg).accept


def test_log_text_roundtrip(honest):
    cfg, log, st = honest
    back = RoundLog.from_text(log.to_text(st.universe), st.universe)
    assert np.array_equal(back.directives, log.directives)
    assert (back.seed_commit, back.seed, back.config_digest) == (log.seed_commit, log.seed,
                                                                 log.config_digest)


def test_wrong_seed_or_config(honest):
    cfg, log, _ = honest
    assert verify_round_log(log.seed_commit, cfg.seed + 1, log, cfg).reason == "commit"
    other = cfg.replace(T_lag=2)
    assert verify_round_log(log.seed_commit, cfg.seed, log, other).reason == "config"


@pytest.mark.parametrize("kind", ["adjacency", "cap", "duplicate"])
def test_single_mutation_rejected(honest, kind):
    cfg, log, _ = honest
    g = np.random.default_rng(0)
    for _ in range(5):
        v = verify_round_log(log.seed_commit, cfg.seed, tamper_log(log, cfg, kind, g), cfg)
        assert not v.accept and v.reason == kind


def test_order_violation(honest):
    cfg, log, _ = honest
    d = log.directives[::-1].copy()
    bad = RoundLog(log.seed_commit, log.n, log.m, log.config_digest, d, log.seed)
    assert verify_round_log(log.seed_commit, cfg.seed, bad, cfg).reason == "order"


def test_directive_log_sorted(honest):
    _, _, st = honest
    d = directive_log(st)
    assert (np.diff(d["stage"]) >= 0).all()
    assert config_digest(st.config) == config_digest(st.config.replace())
