import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkswarm.config import RoundConfig
from chunkswarm.maxflow import (ARC_DRAIN, ARC_SUPPLY, bound_trace, brute_force_optimum,
                                brute_force_subsets, build_stage_network, decode_schedule,
                                feasible_transfers, max_flow, owner_gates, stage_bound,
                                write_bound_csv)
from helpers import SMALL, random_view


def check_schedule(view, d):
    triples = set(feasible_transfers(view))
    n = len(view.res_up)
    for row in d:
        assert (int(row["sender"]), int(row["receiver"]), int(row["chunk"])) in triples
    assert (np.bincount(d["sender"], minlength=n) <= view.res_up).all()
    assert (np.bincount(d["receiver"], minlength=n) <= view.demand).all()
    own = view.owner_of[d["chunk"]] == d["sender"]
    assert (np.bincount(d["sender"][own], minlength=n) <= owner_gates(view)).all()
    assert len({(int(w), int(c)) for w, c in zip(d["receiver"], d["chunk"])}) == len(d)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flow_matches_exhaustive(seed):
    view = random_view(np.random.default_rng(seed))
    value, flow = max_flow(build_stage_network(view))
    literal, _ = max_flow(build_stage_network(view, compress=False))
    assert value == literal == brute_force_optimum(view) == stage_bound(view)
    d = decode_schedule(build_stage_network(view), flow)
    assert len(d) == value
    check_schedule(view, d)


def test_branch_and_bound_matches_subset_enumeration():
    g = np.random.default_rng(1)
    done = 0
    while done < 40:
        view = random_view(g)
        if len(feasible_transfers(view)) > 12:
            continue
        assert brute_force_subsets(view) == brute_force_optimum(view)
        done += 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_sparse_subnetwork_is_lower_bound(seed, limit):
    view = random_view(np.random.default_rng(seed), max_nodes=8, max_chunks=14, max_budget=5)
    sub, _ = max_flow(build_stage_network(view, relay_limit=limit), with_flow=False)
    full, _ = max_flow(build_stage_network(view), with_flow=False)
    assert sub <= full
    assert stage_bound(view, relay_limit=limit) == full


def test_network_caps():
    view = random_view(np.random.default_rng(3))
    net = build_stage_network(view)
    value, _ = max_flow(net)
    assert value <= net.cap[net.kind == ARC_SUPPLY].sum()
    assert value <= net.cap[net.kind == ARC_DRAIN].sum()
    assert stage_bound(view, demand_cap=False) >= value


def test_empty_stage():
    view = random_view(np.random.default_rng(4))
    view.demand[:] = 0
    assert stage_bound(view) == 0


def test_bound_trace_scheduler(tmp_path):
    tr = bound_trace(RoundConfig(**SMALL, seed=2))
    assert tr.outcome == "switch_to_bt" and tr.stages == len(tr.delivered)
    assert tr.k_achievement[-1] == 1.0
    rows = [(i, d, d, u, u) for i, (d, u) in enumerate(zip(tr.delivered, tr.utilization))]
    write_bound_csv(rows, tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) == tr.stages + 1
