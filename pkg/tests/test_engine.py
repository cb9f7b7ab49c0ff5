import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkswarm.config import ByzantineBehavior, FaultSpec, RoundConfig
from chunkswarm.engine import (CANCELLED_DUPLICATE, DEFER_BUDGET, DEFER_WITHHELD, EXECUTED, FAILED,
                               PHASE_SPRAY, PHASE_WARMUP, SKIPPED_INACTIVE, apply_spray, init_state,
                               mark_inactive, observations, read_observations_csv, step,
                               utilization, write_observations_csv)
from chunkswarm.overlay import SPRAY, make_directives


def small(**kw):
    return init_state(RoundConfig(n=6, m=2, K=4, seed=3, **kw))


def nbr(st, u):
    return int(st.adj_idx[st.adj_ptr[u]])


def neighbor_counts(st):
    A = st.overlay.matrix() & st.active[None, :]
    return A.astype(np.int64) @ (st.claimed.astype(np.int64) * st.active[:, None])


def test_initial_state():
    st = small()
    assert (st.held.sum(axis=1) == 4).all()
    assert np.array_equal(st.NH, neighbor_counts(st))
    assert sorted(st.pseudonym) == list(range(6))


def test_step_executes_and_charges():
    st = small()
    w = nbr(st, 0)
    ex, deferred, status = step(st, make_directives(0, 0, w, 1))
    assert list(status) == [EXECUTED] and len(ex) == 1 and len(deferred) == 0
    assert st.held[w, 1] == 1 and st.res_up[0] == st.up[0] - 1 and st.res_down[w] == st.down[w] - 1
    assert np.array_equal(st.NH, neighbor_counts(st))
    assert st.osent[1] == 1


def test_duplicate_and_budget():
    st = small()
    w = nbr(st, 0)
    _, _, s = step(st, make_directives(0, [0, 0], [w, w], [1, 1]))
    assert sorted(s) == [EXECUTED, CANCELLED_DUPLICATE]
    st.res_up[0] = 0
    _, deferred, s = step(st, make_directives(0, 0, w, 2))
    assert list(s) == [DEFER_BUDGET] and len(deferred) == 1


def test_inactive_skipped_and_claims_withdrawn():
    st = small()
    w = nbr(st, 0)
    mark_inactive(st, 0, "dropout")
    _, _, s = step(st, make_directives(0, 0, w, 1))
    assert list(s) == [SKIPPED_INACTIVE]
    assert np.array_equal(st.NH, neighbor_counts(st))
    assert st.inactive_reasons[0][1] == "dropout"


def test_lying_bitfield_fails_and_unclaims():
    fs = FaultSpec(byzantine={0: ByzantineBehavior(lie_bitfield=1.0)})
    st = small(fault_spec=fs)
    w = nbr(st, 0)
    c = int(np.flatnonzero(st.claimed[0] & (st.held[0] == 0) & (st.held[w] == 0))[0])
    _, _, s = step(st, make_directives(0, 0, w, c))
    assert list(s) == [FAILED]
    assert st.claimed[0, c] == 0 and st.held[w, c] == 0
    assert st.violations and st.violations[0][0] == "failed_delivery"
    assert np.array_equal(st.NH, neighbor_counts(st))


def test_withholding_defers():
    st = small(fault_spec=FaultSpec(byzantine={0: ByzantineBehavior(withhold=1.0)}))
    _, deferred, s = step(st, make_directives(0, 0, nbr(st, 0), 1))
    assert list(s) == [DEFER_WITHHELD] and len(deferred) == 1


def test_spray_uncharged_with_fresh_pseudonyms():
    st = small()
    far = int(np.flatnonzero(~st.overlay.matrix()[0])[1])
    apply_spray(st, make_directives(-1, [0, 0], [far, far], [0, 1], SPRAY))
    assert (st.res_up == st.up).all()
    obs = observations(st)
    assert (obs["phase"] == PHASE_SPRAY).all()
    assert list(obs["sender_pseudonym"]) == [6, 7]
    assert (obs["slot"] == -1).all()


def test_observation_csv_roundtrip(tmp_path):
    st = small()
    step(st, make_directives(0, 0, nbr(st, 0), [1, 2]))
    obs = observations(st)
    p = tmp_path / "obs.csv"
    write_observations_csv(obs, st.universe, p)
    assert np.array_equal(read_observations_csv(p, st.universe), obs)
    assert (obs["phase"] == PHASE_WARMUP).all()
    assert (obs["sender_pseudonym"] == st.pseudonym[0]).all()


def test_utilization():
    assert utilization([10, 10, 5], [5, 5], 2) == 1.0
    assert utilization([10, 10, 5], [5, 5], 3) == pytest.approx(25 / 30)
    with pytest.raises(ValueError):
        utilization([1], [1], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 40))
def test_random_directives_respect_budgets(seed, k):
    s = small()
    g = np.random.default_rng(seed)
    u = g.integers(0, 6, k)
    w = np.array([int(g.choice(s.adj_idx[s.adj_ptr[x]:s.adj_ptr[x + 1]])) for x in u])
    c = np.array([int(g.choice(np.flatnonzero(s.held[x]))) for x in u])
    ex, _, status = step(s, make_directives(0, u, w, c))
    assert (s.res_up >= 0).all() and (s.res_down >= 0).all()
    assert (np.bincount(ex["sender"], minlength=6) <= s.up).all()
    assert (np.bincount(ex["receiver"], minlength=6) <= s.down).all()
    assert np.array_equal(s.NH, neighbor_counts(s))
    assert s.held.sum() == 24 + (status == EXECUTED).sum()
