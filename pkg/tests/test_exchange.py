import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, uniform_batch
from moesim.balance import Placement, contiguous_place
from moesim.exchange import (
    Topology,
    apportion,
    plan_dynamic_exchange,
    plan_static_exchange,
    simulate_exchange,
)
from moesim.gating import GatingConfig, dynamic_dispatch, static_dispatch, waste_factor
from moesim.trace import Batch


def top1(assignments):
    e = np.array(assignments)[:, None]
    return Batch(0, e, np.ones_like(e, dtype=float))


ONE_EACH = Placement(np.arange(3), 3)
SINGLE = Topology(3, 3, token_bytes=1, residency="single")


def test_single_device_keeps_everything_local():
    batch = top1([0, 1, 2, 3, 0, 1, 2, 3])
    cfg = GatingConfig(4, 1, 0.5, "static")
    plan = static_dispatch(batch, cfg)
    topo = Topology(1, 4, token_bytes=16)
    cp = plan_static_exchange(plan, topo, contiguous_place(4, 1))
    assert cp.phase("payload").tolist() == [[4 * plan.capacity * 16]]


def test_static_single_source_row():
    plan = static_dispatch(top1([2, 0, 1, 0, 2, 0]), GatingConfig(3, 1, 0.5, "static"))
    cp = plan_static_exchange(plan, SINGLE, ONE_EACH)
    m = cp.phase("payload")
    assert m[0].tolist() == [3, 3, 3]
    assert m[1:].sum() == 0


def test_doubling_capacity_doubles_entries():
    batch = top1([2, 0, 1, 0, 2, 0])
    a = plan_static_exchange(static_dispatch(batch, GatingConfig(3, 1, 0.5, "static")), SINGLE, ONE_EACH)
    b = plan_static_exchange(static_dispatch(batch, GatingConfig(3, 1, 1, "static")), SINGLE, ONE_EACH)
    np.testing.assert_array_equal(b.phase("payload"), 2 * a.phase("payload"))


def test_dynamic_single_source_row():
    plan = dynamic_dispatch(top1([2, 0, 1, 0, 2, 0]), GatingConfig(3, 1, 0.5, "dynamic"))
    cp = plan_dynamic_exchange(plan, SINGLE, ONE_EACH)
    assert cp.phase_names == ("size", "payload")
    assert cp.phase("payload")[0].tolist() == [3, 1, 2]
    assert cp.phase("size").tolist() == [[8, 8, 8]] * 3


def test_dynamic_zero_count_expert_gets_nothing():
    plan = dynamic_dispatch(top1([0, 0, 2, 2]), GatingConfig(3, 1, 1, "dynamic"))
    cp = plan_dynamic_exchange(plan, SINGLE, ONE_EACH)
    assert cp.phase("payload")[:, 1].sum() == 0


def direct_dynamic_bytes(batch, topo, placement):
    """Oracle: walk every (token, choice) slot and add its bytes to the right link."""
    D = topo.num_devices
    m = [[0] * D for _ in range(D)]
    for t, experts in enumerate(batch.experts.tolist()):
        src = 0 if topo.residency == "single" else t % D
        for e in experts:
            m[src][int(placement.device_of[e])] += topo.token_bytes
    return m


@pytest.mark.parametrize("seed", range(30))
def test_dynamic_payload_matches_direct_walk(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.choice([1, 2, 4]))
    E = D * int(rng.integers(1, 5))
    k = min(E, int(rng.integers(1, 3)))
    S = int(rng.integers(1, 50))
    batch = random_batch(rng, S, E, k, skew=0.5)
    topo = Topology(D, E, token_bytes=int(rng.integers(1, 9)))
    placement = Placement(rng.permutation(np.arange(E) % D), D)
    cp = plan_dynamic_exchange(dynamic_dispatch(batch, GatingConfig(E, k, 1, "dynamic")), topo, placement)
    assert cp.phase("payload").tolist() == direct_dynamic_bytes(batch, topo, placement)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 2), st.integers(1, 40),
    st.integers(1, 20), st.integers(0, 10_000), st.sampled_from(["round_robin", "single"]),
)
def test_exchange_invariants(D, per, k, S, c10, seed, residency):
    E = D * per
    k = min(k, E)
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, S, E, k, skew=0.4)
    topo = Topology(D, E, token_bytes=4, size_msg_bytes=8, residency=residency)
    placement = Placement(rng.permutation(np.arange(E) % D), D)
    C = c10 / 10

    sp = static_dispatch(batch, GatingConfig(E, k, C, "static"))
    st_cp = plan_static_exchange(sp, topo, placement)
    assert st_cp.total_bytes("payload") == E * sp.capacity * 4
    assert st_cp.phase("payload").min() >= 0

    dp = dynamic_dispatch(batch, GatingConfig(E, k, C, "dynamic"))
    dy_cp = plan_dynamic_exchange(dp, topo, placement)
    assert dy_cp.total_bytes("payload") == k * S * 4
    assert dy_cp.total_bytes("size") == D * E * 8
    incoming = dy_cp.phase("payload").sum(axis=0) // 4
    expected = [dp.counts[placement.experts_on(n)].sum() for n in range(D)]
    assert incoming.tolist() == expected

    rev = dy_cp.reverse()
    np.testing.assert_array_equal(rev.phase("payload"), dy_cp.phase("payload").T)


@pytest.mark.parametrize("E, C, k", [(8, 1, 2), (16, 0.5, 1), (32, 0.25, 2), (64, 0.125, 2)])
def test_uniform_payload_ratio_is_waste_factor(E, C, k):
    S = 256
    batch = uniform_batch(S, E, k)
    topo = Topology(4, E, token_bytes=2)
    placement = contiguous_place(E, 4)
    static = plan_static_exchange(static_dispatch(batch, GatingConfig(E, k, C, "static")), topo, placement)
    dynamic = plan_dynamic_exchange(dynamic_dispatch(batch, GatingConfig(E, k, C, "dynamic")), topo, placement)
    ratio = static.total_bytes("payload") / dynamic.total_bytes("payload")
    assert ratio == pytest.approx(float(waste_factor(E, C, k).value), rel=0.02)


def test_simulate_zero_bytes_costs_latency_only():
    plan = plan_dynamic_exchange(
        dynamic_dispatch(top1([0]), GatingConfig(3, 1, 1, "dynamic")),
        Topology(3, 3, token_bytes=1, size_msg_bytes=1),
        ONE_EACH,
    )
    zero = type(plan)("dynamic", tuple((n, np.zeros_like(m)) for n, m in plan.phases))
    rep = simulate_exchange(zero, link_bandwidth=1e9, link_latency=3e-6)
    assert rep.phase_times == {"size": 3e-6, "payload": 3e-6}


def test_simulate_single_link():
    plan = static_dispatch(top1([0] * 100), GatingConfig(1, 1, 1, "static"))
    cp = plan_static_exchange(plan, Topology(1, 1, token_bytes=1), contiguous_place(1, 1))
    rep = simulate_exchange(cp, link_bandwidth=100)
    assert rep.phase_times["payload"] == 1.0
    assert rep.total_time == 1.0


def test_simulate_uses_bottleneck_link_and_overlap():
    plan = dynamic_dispatch(top1([2, 0, 1, 0, 2, 0]), GatingConfig(3, 1, 1, "dynamic"))
    cp = plan_dynamic_exchange(plan, SINGLE, ONE_EACH)
    rep = simulate_exchange(cp, link_bandwidth=1.0, link_latency=0.0, overlap_time=5.0)
    assert rep.max_link_bytes["payload"] == 3
    assert rep.phase_bytes == {"size": 72, "payload": 6}
    assert rep.phase_times["size"] == 8.0
    assert rep.total_time == 8.0 + 3.0
    rep = simulate_exchange(cp, link_bandwidth=1.0, overlap_time=20.0)
    assert rep.total_time == 20.0 + 3.0


def test_static_dynamic_time_ratio_at_zero_latency():
    E, k, C, S = 16, 2, 1, 512
    # every source device (t % 4) spreads its slots evenly over all experts
    experts = ((np.arange(S)[:, None] // 4) * k + np.arange(k)) % E
    batch = Batch(0, experts, np.full((S, k), 0.5))
    topo = Topology(4, E, token_bytes=8)
    p = contiguous_place(E, 4)
    s = simulate_exchange(plan_static_exchange(static_dispatch(batch, GatingConfig(E, k, C, "static")), topo, p), 1e9)
    d = simulate_exchange(plan_dynamic_exchange(dynamic_dispatch(batch, GatingConfig(E, k, C, "dynamic")), topo, p), 1e9)
    ratio = s.phase_times["payload"] / d.phase_times["payload"]
    assert ratio == pytest.approx(E * C / k, rel=0.02)


def test_simulate_rejects_bad_bandwidth():
    cp = plan_static_exchange(static_dispatch(top1([0]), GatingConfig(1, 1, 1, "static")),
                              Topology(1, 1, token_bytes=1), contiguous_place(1, 1))
    with pytest.raises(ValueError):
        simulate_exchange(cp, link_bandwidth=0)


def test_mismatch_errors():
    plan = static_dispatch(top1([0, 1]), GatingConfig(4, 1, 1, "static"))
    with pytest.raises(ValueError, match="does not match"):
        plan_static_exchange(plan, Topology(2, 4, token_bytes=1), contiguous_place(4, 4))
    with pytest.raises(ValueError, match="plan routes"):
        plan_static_exchange(plan, Topology(2, 6, token_bytes=1), contiguous_place(6, 2))


def test_topology_validation():
    with pytest.raises(ValueError):
        Topology(3, 4, token_bytes=1)
    with pytest.raises(ValueError):
        Topology(2, 4, token_bytes=0)
    with pytest.raises(ValueError, match="residency"):
        Topology(2, 4, token_bytes=1, residency="scatter")


@pytest.mark.parametrize("total, weights, expected", [(3, [1, 1, 1], [1, 1, 1]), (3, [2, 2, 1], [1, 1, 1]),
                                                      (7, [3, 3], [4, 3]), (5, [1, 0, 0], [5, 0, 0])])
def test_apportion(total, weights, expected):
    assert apportion(total, weights).tolist() == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.lists(st.integers(0, 50), min_size=1, max_size=8).filter(lambda w: sum(w) > 0))
def test_apportion_is_exact_and_within_one(total, weights):
    out = apportion(total, weights)
    assert out.sum() == total
    exact = [total * w / sum(weights) for w in weights]
    assert all(math.floor(x) <= o <= math.ceil(x) for o, x in zip(out.tolist(), exact))


def test_comm_csv(tmp_path):
    plan = dynamic_dispatch(top1([2, 0, 1, 0, 2, 0]), GatingConfig(3, 1, 1, "dynamic"))
    cp = plan_dynamic_exchange(plan, SINGLE, ONE_EACH)
    cp.to_csv(tmp_path / "comm.csv")
    with open(tmp_path / "comm.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["phase", "src", "dst", "bytes"]
    assert len(rows) == 2 * 9
    payload = [int(r["bytes"]) for r in rows if r["phase"] == "payload" and r["src"] == "0"]
    assert payload == [3, 1, 2]
