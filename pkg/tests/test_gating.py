import json
import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from conftest import brute_force_fill, random_batch
from moesim.gating import (
    PLACEHOLDER,
    GatingConfig,
    combine,
    dispatch_cost_counts,
    dispatch_mask_elements,
    dispatch_payloads,
    dynamic_dispatch,
    expert_capacity,
    merge_argsort,
    static_dispatch,
    waste_factor,
)
from moesim.trace import Batch


def top1(assignments, batch_id=0):
    e = np.array(assignments)[:, None]
    return Batch(batch_id, e, np.ones_like(e, dtype=float))


STATIC = GatingConfig(3, 1, 0.5, "static")
DYNAMIC = GatingConfig(3, 1, 0.5, "dynamic")


def test_static_balanced_example():
    plan = static_dispatch(top1([2, 0, 1, 0, 2, 0]), STATIC)
    assert plan.capacity == 3
    rows = plan.token_rows().tolist()
    assert rows == [[1, 3, 5], [2, PLACEHOLDER, PLACEHOLDER], [0, 4, PLACEHOLDER]]
    assert plan.dropped == ()


def test_static_overflow_example():
    plan = static_dispatch(top1([0, 0, 0, 0, 1, 2]), STATIC)
    assert plan.token_rows()[0].tolist() == [0, 1, 2]
    assert plan.dropped == ((3, 0),)


def test_static_under_capacity():
    plan = static_dispatch(top1([0, 1]), GatingConfig(2, 1, 1, "static"))
    assert plan.token_rows().tolist() == [[0, PLACEHOLDER], [1, PLACEHOLDER]]
    assert plan.dropped == ()


def test_static_needs_static_mode():
    with pytest.raises(ValueError, match="static-mode"):
        static_dispatch(top1([0]), DYNAMIC)


def test_zero_capacity():
    with pytest.raises(ValueError, match="capacity_factor"):
        GatingConfig(3, 1, 0, "static")
    with pytest.raises(ValueError, match="zero capacity"):
        static_dispatch(top1([0]), STATIC, capacity=0)


@pytest.mark.parametrize("seed", range(200))
def test_static_matches_brute_force_fill(seed):
    rng = np.random.default_rng(seed)
    E, k = int(rng.integers(2, 12)), int(rng.integers(1, 3))
    k = min(k, E)
    S = int(rng.integers(1, 60))
    C = Fraction(int(rng.integers(1, 20)), 10)
    batch = random_batch(rng, S, E, k, skew=0.3)
    plan = static_dispatch(batch, GatingConfig(E, k, C, "static"))
    rows, dropped = brute_force_fill(batch.experts.tolist(), E, math.ceil(C * S))
    got = plan.token_rows()
    for e in range(E):
        assert [t for t in got[e].tolist() if t != PLACEHOLDER] == rows[e]
    assert list(plan.dropped) == dropped
    # invariants
    assert plan.slots.shape == (E, plan.capacity)
    assert plan.placed.sum() + len(plan.dropped) == k * S
    n = plan.counts
    drops = Counter(e for _, e in plan.dropped)
    assert all(drops[e] == max(0, n[e] - plan.capacity) for e in range(E))
    assert not set(plan.pairs()) & set(plan.dropped)


def test_dynamic_example():
    plan = dynamic_dispatch(top1([2, 0, 1, 0, 2, 0]), DYNAMIC)
    assert plan.counts.tolist() == [3, 1, 2]
    assert plan.splits.tolist() == [0, 3, 4, 6]
    assert [plan.segment(e).tolist() for e in range(3)] == [[1, 3, 5], [2], [0, 4]]


def test_dynamic_all_to_one():
    plan = dynamic_dispatch(top1([0] * 7), GatingConfig(4, 1, 1, "dynamic"))
    assert plan.counts.tolist() == [7, 0, 0, 0]
    assert plan.order.tolist() == list(range(7))


def test_dynamic_top2_segments_in_token_order():
    batch = Batch(0, np.array([[0, 1], [1, 0]]), np.full((2, 2), 0.5))
    plan = dynamic_dispatch(batch, GatingConfig(2, 2, 1, "dynamic"))
    assert plan.counts.tolist() == [2, 2]
    # slot 0 = (t0, choice 0), slot 3 = (t1, choice 1)
    assert plan.segment(0).tolist() == [0, 3]
    assert plan.segment(1).tolist() == [1, 2]


def direct_scan(batch, E):
    """Oracle: group slots by expert with a plain scan in slot order."""
    groups = [[] for _ in range(E)]
    for s, e in enumerate(batch.experts.ravel().tolist()):
        groups[e].append(s)
    return groups


@pytest.mark.parametrize("seed", range(100))
def test_dynamic_matches_direct_scan(seed):
    rng = np.random.default_rng(seed)
    E = int(rng.integers(2, 20))
    k = int(rng.integers(1, 3))
    S = int(rng.integers(1, 100))
    batch = random_batch(rng, S, E, k, skew=0.5)
    plan = dynamic_dispatch(batch, GatingConfig(E, k, 1, "dynamic"))
    assert [plan.segment(e).tolist() for e in range(E)] == direct_scan(batch, E)
    assert sorted(plan.order.tolist()) == list(range(k * S))
    assert plan.counts.sum() == k * S


def test_combine_dynamic_is_inverse():
    batch = top1([2, 0, 1, 0, 2, 0])
    plan = dynamic_dispatch(batch, DYNAMIC)
    tokens = [f"tok{t}" for t in range(6)]
    out = combine(plan, dispatch_payloads(plan, tokens))
    assert [pairs[0][0] for pairs in out] == tokens
    assert all(len(p) == 1 for p in out)


def test_combine_static_drops_contribute_nothing():
    plan = static_dispatch(top1([0, 0, 0, 0, 1, 2]), STATIC)
    per_expert = dispatch_payloads(plan, list(range(6)))
    assert per_expert[1] == [4, None, None]
    out = combine(plan, per_expert)
    assert out[3] == []
    assert [p[0][0] for i, p in enumerate(out) if i != 3] == [0, 1, 2, 4, 5]
    assert all(payload is not None for pairs in out for payload, _ in pairs)


def test_combine_top2_pairs_weights():
    batch = Batch(0, np.array([[0, 1], [2, 0]]), np.array([[0.75, 0.25], [0.6, 0.4]]))
    plan = dynamic_dispatch(batch, GatingConfig(3, 2, 1, "dynamic"))
    out = combine(plan, dispatch_payloads(plan, ["a", "b"]))
    assert out == [[("a", 0.75), ("a", 0.25)], [("b", 0.6), ("b", 0.4)]]


def test_combine_rejects_count_mismatch():
    plan = dynamic_dispatch(top1([0, 1, 1]), GatingConfig(2, 1, 1, "dynamic"))
    with pytest.raises(ValueError, match="expert 1"):
        combine(plan, [[0], [1]])
    with pytest.raises(ValueError, match="outputs for 2 experts"):
        combine(plan, [[0]])


def test_plans_serialize_to_json():
    b = top1([2, 0, 1, 0, 2, 0])
    s = json.loads(json.dumps(static_dispatch(b, STATIC).to_dict()))
    assert s["slots"][1] == [2, None, None]
    d = json.loads(json.dumps(dynamic_dispatch(b, DYNAMIC).to_dict()))
    assert d["counts"] == [3, 1, 2]


@pytest.mark.parametrize("E, C, k, expected", [(512, 0.05, 2, Fraction(64, 5)), (128, 1, 2, 64), (16, Fraction(2, 16), 2, 1)])
def test_waste_factor(E, C, k, expected):
    wf = waste_factor(E, C, k)
    assert wf.value == expected
    assert wf == expected


def test_waste_factor_identity_on_rationals():
    for E, C, k, S in [(512, "0.05", 2, 2048), (128, 1, 2, 100), (8, "0.375", 1, 64)]:
        C = Fraction(C)
        assert waste_factor(E, C, k).value == (E * C * S) / (k * S)


def test_waste_factor_rejects_nonpositive():
    with pytest.raises(ValueError):
        waste_factor(0, 1, 1)
    with pytest.raises(ValueError):
        waste_factor(4, -0.1, 1)


@pytest.mark.parametrize("S, E, C, expected", [(6, 3, 0.5, 54), (1, 1, 1, 1), (2048, 512, 0.05, 512 * 2048 * 103)])
def test_dispatch_mask_elements(S, E, C, expected):
    assert dispatch_mask_elements(S, E, C) == expected


def test_capacity_uses_exact_rationals():
    # 0.1 * 30 is 3.0000000000000004 in binary floating point
    assert expert_capacity(30, 0.1) == 3
    assert expert_capacity(2048, 0.05) == 103


def test_merge_argsort_is_stable():
    rng = np.random.default_rng(0)
    keys = rng.integers(0, 5, size=300).tolist()
    order, _ = merge_argsort(keys)
    assert order == np.argsort(keys, kind="stable").tolist()


def test_dispatch_cost_counts():
    plan = dynamic_dispatch(top1([0]), GatingConfig(2, 1, 1, "dynamic"))
    assert dispatch_cost_counts(plan, 16) == {"comparisons": 0, "count_passes": 1, "gather_elements": 16}

    rng = np.random.default_rng(1)
    a = dynamic_dispatch(random_batch(rng, 64, 8, 2), GatingConfig(8, 2, 1, "dynamic"))
    b = dynamic_dispatch(random_batch(rng, 128, 8, 2), GatingConfig(8, 2, 1, "dynamic"))
    assert dispatch_cost_counts(b, 32)["gather_elements"] == 2 * dispatch_cost_counts(a, 32)["gather_elements"]


def test_sort_comparisons_scale_as_n_log_n():
    rng = np.random.default_rng(2)
    ratios = []
    for exp in range(8, 17, 2):
        S = 2**exp
        batch = Batch(0, rng.integers(0, 64, size=(S, 1)), np.ones((S, 1)))
        counts = dispatch_cost_counts(dynamic_dispatch(batch, GatingConfig(64, 1, 1, "dynamic")), 8)
        ratios.append(counts["comparisons"] / (S * math.log2(S)))
    assert max(ratios) <= 1.0
    assert max(ratios) / min(ratios) < 1.5
