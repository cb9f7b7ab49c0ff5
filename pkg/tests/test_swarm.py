import numpy as np
import pytest

from chunkswarm.config import FaultSpec, RoundConfig
from chunkswarm.engine import PHASE_BT, init_state
from chunkswarm.swarm import (AggregationError, UpdateVector, aggregate_all, checksum, fedavg,
                              reconstructable_set, run_bittorrent, synthetic_updates,
                              write_aggregation_csv)
from chunkswarm.warmup import prepare_round, run_warmup
from helpers import SMALL


def full_round(**kw):
    cfg = RoundConfig(**{**SMALL, "seed": 4, **kw})
    st = init_state(cfg)
    ws = prepare_round(cfg, st)
    run_warmup(st, ws)
    end = run_bittorrent(st)
    return cfg, st, end


def central(updates, members):
    members = sorted(members)
    total = sum(updates[u].weight for u in members)
    acc = np.zeros_like(updates[members[0]].values)
    for u in members:
        acc = acc + (updates[u].weight / total) * updates[u].values
    return acc


def test_full_dissemination_agrees_bitwise():
    cfg, st, end = full_round()
    assert st.held.all()
    updates = synthetic_updates(cfg.n, 16, cfg.seed)
    agg = aggregate_all(st, updates)
    ref = central(updates, range(cfg.n))
    assert all(np.array_equal(a, ref) for _, a in agg.values())
    assert len({checksum(a) for _, a in agg.values()}) == 1
    w = np.array([u.weight for u in updates])
    assert np.allclose(ref, np.average([u.values for u in updates], axis=0, weights=w))


def test_missing_update_excluded_and_agreement():
    cfg, st, _ = full_round(R=0.0, fault_spec=FaultSpec(dropouts=((3, 0),)))
    updates = synthetic_updates(cfg.n, 16, cfg.seed)
    agg = aggregate_all(st, updates)
    assert 3 not in agg
    members = {m for m, _ in agg.values()}
    assert members == {tuple(u for u in range(cfg.n) if u != 3)}
    ref = central(updates, members.pop())
    assert all(np.array_equal(a, ref) for _, a in agg.values())


def test_bt_respects_budgets_and_adjacency():
    cfg, st, end = full_round()
    t = st.transfers()
    bt = t["phase"] == PHASE_BT
    assert st.overlay.matrix()[t["sender"][bt], t["receiver"][bt]].all()
    for s in np.unique(t["stage"][bt]):
        sel = bt & (t["stage"] == s)
        assert (np.bincount(t["sender"][sel], minlength=cfg.n) <= st.up).all()
        assert (np.bincount(t["receiver"][sel], minlength=cfg.n) <= st.down).all()
    assert end == st.slot


def test_reconstructable_set_and_errors():
    held = np.array([[1, 1, 0, 1], [0, 0, 0, 0]], dtype=np.uint8)
    assert reconstructable_set(0, held, [0, 2, 3, 4]).members == (0, 2)
    with pytest.raises(AggregationError):
        reconstructable_set(1, held, [0, 2, 3, 4])
    with pytest.raises(AggregationError):
        fedavg([], [])
    with pytest.raises(ValueError):
        UpdateVector(0, 0.0, np.zeros(2))


def test_fedavg_weights():
    ups = [UpdateVector(0, 1.0, np.array([1.0, 0.0])), UpdateVector(1, 3.0, np.array([0.0, 4.0]))]
    assert np.allclose(fedavg(ups, [1, 0]), [0.25, 3.0])


def test_aggregation_csv(tmp_path):
    cfg, st, _ = full_round()
    agg = aggregate_all(st, synthetic_updates(cfg.n, 4, 0))
    p = tmp_path / "agg.csv"
    write_aggregation_csv(agg, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "node,reconstructable_count,aggregate_checksum"
    assert len(lines) == cfg.n + 1
