import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apusim import scheduler as sc
from apusim.errors import ApuError


def brute_min_length(triples):
    """Exhaustive oracle: shortest legal cycle assignment of a tiny demand."""
    for length in range(1, len(triples) + 1):
        for slots in itertools.product(range(length), repeat=len(triples)):
            ok = True
            for t in range(length):
                cyc = [tr for tr, s in zip(triples, slots) if s == t]
                if len({s for s, _, _ in cyc}) < len(cyc) or len({d for _, d, _ in cyc}) < len(cyc):
                    ok = False
                    break
            if ok:
                return length
    return 0


def is_matching(cycle):
    """Independent legality check by direct pair comparison."""
    for (s1, d1, _), (s2, d2, _) in itertools.combinations(cycle, 2):
        if s1 == s2 or d1 == d2:
            return False
    return True


@st.composite
def demands(draw, max_n=8, max_triples=64):
    n = draw(st.integers(1, max_n))
    k = draw(st.integers(0, max_triples))
    raw = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1),
                                  st.integers(0, 40)), max_size=k, unique=True))
    return sc.RoutingDemand(n, n, tuple(raw))


def balanced_demand(n, per_pair, seed):
    rng = np.random.default_rng(seed)
    triples = [(s, d, a) for s in range(n) for d in range(n) for a in range(per_pair)]
    rng.shuffle(triples)
    return sc.RoutingDemand(n, n, tuple(map(tuple, triples)))


def test_two_by_two_all_pairs():
    d = sc.RoutingDemand(2, 2, ((0, 0, 0), (0, 1, 1), (1, 0, 2), (1, 1, 3)))
    s = sc.build_schedule(d)
    assert s.length == 2 == brute_min_length(list(d.triples))
    assert all(len(c) == 2 for c in s.cycles)
    assert sc.verify_schedule(d, s).ok


@pytest.mark.parametrize("strategy", sc.STRATEGIES)
def test_single_pair_serializes(strategy):
    d = sc.RoutingDemand(1, 1, tuple((0, 0, a) for a in range(7)))
    s = sc.build_schedule(d, strategy)
    assert s.length == 7 and all(len(c) == 1 for c in s.cycles)
    # same-pair values arrive in demand order
    assert [c[0][2] for c in s.cycles] == list(range(7))


def test_ten_block_layer_takes_400_cycles():
    d = sc.RoutingDemand(10, 10, tuple((s, (s + k) % 10, k) for s in range(10) for k in range(400)))
    s = sc.build_schedule(d)
    assert d.balanced and s.length == 400
    assert sc.verify_schedule(d, s).ok


@settings(max_examples=500)
@given(demands())
def test_random_demands_verify(d):
    for strategy in sc.STRATEGIES:
        s = sc.build_schedule(d, strategy)
        assert sc.verify_schedule(d, s).ok
        assert s.length >= d.lower_bound
        assert all(is_matching(c) for c in s.cycles)
    assert sc.build_schedule(d).length == d.lower_bound


@settings(max_examples=80)
@given(demands(max_n=3, max_triples=6))
def test_matching_is_optimal_on_tiny_demands(d):
    assert sc.build_schedule(d).length == brute_min_length(list(d.triples))


@pytest.mark.parametrize("n", range(1, 9))
def test_balanced_reaches_lower_bound(n):
    for seed in range(3):
        d = balanced_demand(n, 1 + seed, seed)
        s = sc.build_schedule(d)
        assert s.length == d.lower_bound == n * (1 + seed)
        assert sc.verify_schedule(d, s).ok


def test_rectangular_demand():
    d = sc.RoutingDemand(3, 5, tuple((s, d, s * 5 + d) for s in range(3) for d in range(5)))
    s = sc.build_schedule(d)
    assert s.length == 5 and sc.verify_schedule(d, s).ok


def test_deterministic():
    d = balanced_demand(6, 3, 0)
    assert sc.build_schedule(d) == sc.build_schedule(d)
    assert sc.build_schedule(d, "greedy") == sc.build_schedule(d, "greedy")


def test_verify_reports_each_violation():
    d = sc.RoutingDemand(2, 2, ((0, 0, 0), (1, 1, 1)))
    good = sc.build_schedule(d)
    assert sc.verify_schedule(d, good)

    def check(cycles, kind, cycle):
        res = sc.verify_schedule(d, sc.RoutingSchedule(2, 2, cycles))
        assert not res.ok and res.first.kind == kind and res.first.cycle == cycle
        assert kind in str(res.first)

    check((((0, 0, 0), (1, 1, 1)), ((0, 0, 0),)), "delivered twice", 1)
    check((((0, 0, 0),),), "undelivered", None)
    check((((0, 0, 0), (0, 1, 9)),), "source used twice", 0)
    check((((0, 0, 0), (1, 0, 9)),), "destination used twice", 0)
    check((((0, 0, 0), (1, 1, 1), ), ((1, 0, 5),)), "not in demand", 1)
    check((((5, 0, 0),),), "out of range", 0)


def test_demand_validation():
    with pytest.raises(ApuError):
        sc.RoutingDemand(2, 2, ((0, 0, 0), (0, 0, 0)))
    with pytest.raises(ApuError):
        sc.RoutingDemand(2, 2, ((2, 0, 0),))
    with pytest.raises(ApuError):
        sc.RoutingDemand(0, 2, ())
    with pytest.raises(ApuError):
        sc.build_schedule(sc.RoutingDemand(1, 1, ()), "fastest")
    assert sc.build_schedule(sc.RoutingDemand(3, 3, ())).length == 0


def test_select_width():
    assert sc.select_width(2) == 1
    assert sc.select_width(10) == 4
    assert sc.select_width(16) == 4
    assert sc.select_width(17) == 5


def test_select_bits_ten_sources():
    d = sc.RoutingDemand(10, 10, tuple((s, (s + k) % 10, k) for s in range(10) for k in range(400)))
    t = sc.emit_selects(sc.build_schedule(d), 10)
    assert t.bits == 16_000
    counted = sum(t.width for _ in np.ndindex(t.table.shape))
    assert counted == 16_000


@given(demands(max_n=6, max_triples=30))
def test_select_table_round_trip(d):
    s = sc.build_schedule(d, "greedy")
    t = sc.emit_selects(s, d.num_sources)
    back = sc.SelectTable.from_bytes(t.to_bytes())
    assert np.array_equal(back.table, t.table) and back.num_sources == t.num_sources
    assert back.idle_count == t.idle_count == t.table.size - len(d.triples)
    # every transfer appears as the dest's select in its cycle
    for cyc_t, s_, d_, _ in s.transfers():
        assert t.table[d_, cyc_t] == s_


def test_select_table_rejects_garbage():
    with pytest.raises(ApuError):
        sc.SelectTable.from_bytes(b"nonsense" * 4)
    t = sc.emit_selects(sc.build_schedule(balanced_demand(3, 1, 0)))
    with pytest.raises(ApuError):
        sc.SelectTable.from_bytes(t.to_bytes()[:-2])


def test_csv_dumps():
    d = sc.RoutingDemand(2, 2, ((0, 1, 4), (1, 0, 2)))
    s = sc.build_schedule(d)
    lines = s.to_csv().splitlines()
    assert lines[0] == "cycle,source,dest,activation_index" and len(lines) == 3
    assert sc.emit_selects(s).to_csv().splitlines()[0] == "dest,cycle,select"
    assert sc.broadcast_lists(s).shape == (2, s.length)
