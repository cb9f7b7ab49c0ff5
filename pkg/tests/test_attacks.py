import numpy as np
import pytest

from chunkswarm.attacks import (NO_GUESS, AttackOutput, Coalition, asr, attack_amount_greedy,
                                attack_clustering, attack_sequential, collude, correct,
                                pick_coalition, round_observations, run_attacks,
                                warmup_round_observations, write_asr_csv)
from chunkswarm.config import RoundConfig
from chunkswarm.engine import OBSERVATION_DTYPE, PHASE_BT, PHASE_SPRAY, PHASE_WARMUP
from chunkswarm.harness import run_experiment, with_defenses
from helpers import SMALL


def obs_of(rows):
    """rows: (slot, observer, pseudonym, chunk)"""
    out = np.zeros(len(rows), dtype=OBSERVATION_DTYPE)
    for i, (s, o, p, c) in enumerate(rows):
        out[i] = (s, o, p, c, PHASE_WARMUP)
    return out


# chunk id equals its owner label here
OWNER = np.arange(10)


def test_sequential_first_descriptor():
    out = attack_sequential(obs_of([(0, 9, 1, 3), (1, 9, 1, 1), (0, 9, 2, 2)]), OWNER)
    assert dict(zip(out.pseudonyms, out.guesses)) == {1: 3, 2: 2}
    assert list(out.counts) == [2, 1]


def test_amount_greedy_first_half():
    rows = [(0, 9, 1, 4), (1, 9, 1, 4), (2, 9, 1, 1), (3, 9, 1, 1), (4, 9, 1, 1)]
    assert attack_amount_greedy(obs_of(rows), OWNER).guesses[0] == 4
    tie = [(0, 9, 1, 5), (1, 9, 1, 2), (2, 9, 1, 2), (3, 9, 1, 5)]
    assert attack_amount_greedy(obs_of(tie), OWNER).guesses[0] == 2


def test_clustering_rank_weights():
    rows = [(0, 9, 1, 7), (1, 9, 1, 2), (2, 9, 1, 2), (3, 9, 1, 2)]
    # 1 vs 1/2 + 1/3 + 1/4
    assert attack_clustering(obs_of(rows), OWNER).guesses[0] == 2
    rows = rows[:3]
    assert attack_clustering(obs_of(rows), OWNER).guesses[0] == 7


def test_correct_and_asr():
    truth = np.array([0, 1, 2])
    a = AttackOutput((5,), np.array([0, 1]), np.array([0, 2]), np.array([1, 1]))
    b = AttackOutput((6,), np.array([2]), np.array([NO_GUESS]), np.array([1]))
    assert list(correct(a, truth)) == [True, False]
    r = asr([a, b, AttackOutput((7,), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))], truth)
    assert r["per_receiver"] == {(5,): 0.5, (6,): 0.0}
    assert r["max"] == 0.5 and r["mean"] == 0.25
    assert np.isnan(asr([], truth)["max"])


def test_warmup_filter():
    o = obs_of([(0, 1, 2, 3), (0, 1, 12, 3)])
    o["phase"][1] = PHASE_SPRAY
    assert len(warmup_round_observations(o, 10)) == 1
    o["phase"][0] = PHASE_BT
    assert len(warmup_round_observations(o, 10)) == 0
    assert len(round_observations(o, 10)) == 1


def test_coalition_validation_and_pick():
    with pytest.raises(ValueError):
        Coalition(())
    with pytest.raises(ValueError):
        Coalition((1,), phi=2.0)
    c = pick_coalition(50, 5, 1)
    assert len(set(c.members)) == 5 and c == pick_coalition(50, 5, 1)


def test_collude_pools_and_masses():
    truth = np.arange(6)
    o = obs_of([(0, 0, 3, 3), (0, 1, 4, 1), (1, 1, 0, 0), (0, 2, 5, 5)])
    res = collude(o, OWNER, Coalition((0, 1)), truth, "sequential",
                  relay_origin=(np.array([3, 3, 4]), np.array([0, 5, 1])))
    assert set(res.pooled.pseudonyms) == {3, 4}  # member pseudonym 0 dropped
    assert res.any_success == 0.5
    assert res.per_attacker_mean == 0.5 and res.per_attacker_max == 1.0
    assert res.rho[3] == 0.5 and res.rho[4] == 1.0
    assert np.allclose(res.X_eff[[3, 4]], [1.0, 0.0])


def test_no_defense_sequential_is_exact():
    cfg = with_defenses(RoundConfig(**SMALL, seed=3), "none")
    rep = run_experiment(cfg, attacks="sequential", bittorrent=False)
    assert rep.asr_table["sequential"]["max"] == 1.0


def test_run_attacks_per_observer():
    cfg = RoundConfig(**SMALL, seed=3)
    rep = run_experiment(cfg, attacks="none", bittorrent=False, keep_artifacts=True)
    st = rep.artifacts["state"]
    obs = warmup_round_observations(rep.artifacts["observations"], cfg.n)
    outs = run_attacks(obs, st.universe.owner_of, cfg.n, ["sequential"])
    assert [o.attacker for o in outs["sequential"]] == [(v,) for v in range(cfg.n)]
    assert sum(int(o.counts.sum()) for o in outs["sequential"]) == len(obs)


def test_asr_csv(tmp_path):
    p = tmp_path / "a.csv"
    write_asr_csv([{"seed": 1, "attack": "sequential", "asr_max": 0.5, "asr_mean": 0.25}], p)
    assert p.read_text().splitlines()[1].startswith("1,sequential")
