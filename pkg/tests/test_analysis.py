import itertools
import math
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifnas.analysis import (count_space, depth_stats, param_count, sci_round, stage_count,
                            summarize_trajectories)
from ifnas.cost import fixed_params
from ifnas.experiments import Figure1Config, interference_pairs, run_figure1
from ifnas.space import Connection, DiscreteArchitecture, OperatorKind as Op, SupernetSpec, \
    chain_architecture


def brute_stage_count(L, n, n_ops=2):
    """Count input assignments node by node; the literal rule drops the first full-fan-in node."""
    total = 1
    for k in range(1, n + 1):
        fan_in = min(k, L)
        total *= 2 ** (n_ops * fan_in) - 1
    return total // (2 ** (n_ops * L) - 1)


@pytest.mark.parametrize("L, sci", [(4, "1.8e116"), (6, "7.5e163"), (8, "1.6e204")])
def test_table_values(L, sci):
    assert count_space(L, [18, 20, 18]).sci == sci


def test_trivial_counts():
    assert count_space(1, [2]).exact_count == 3
    assert count_space(1, [2]).sci == "3"
    assert stage_count(1, 2, formula="prose") == 9


def test_bad_arguments():
    with pytest.raises(ValueError):
        count_space(4, [3])
    with pytest.raises(ValueError):
        stage_count(2, 4, formula="other")


@settings(max_examples=100, deadline=None)
@given(L=st.integers(1, 6), extra=st.integers(0, 10), n_ops=st.integers(1, 3))
def test_stage_count_matches_node_by_node_product(L, extra, n_ops):
    n = L + extra
    assert stage_count(L, n, n_ops) == brute_stage_count(L, n, n_ops)
    assert stage_count(L, n, n_ops, "prose") == stage_count(L, n, n_ops) * (2 ** (n_ops * L) - 1)


def test_prose_count_equals_enumeration_of_tiny_space():
    # every node picks a non-empty subset of (precursor, op) pairs
    L, n, n_ops = 2, 3, 2
    total = 1
    for k in range(1, n + 1):
        pairs = min(k, L) * n_ops
        total *= sum(1 for r in range(1, pairs + 1) for _ in itertools.combinations(range(pairs), r))
    assert stage_count(L, n, n_ops, "prose") == total


def test_monotone_in_n_and_l():
    for L in range(1, 7):
        vals = [count_space(L, [n]).exact_count for n in range(L, 20)]
        assert all(a < b for a, b in zip(vals, vals[1:]))
    for n in range(8, 20):
        vals = [count_space(L, [n]).exact_count for L in range(1, 9)]
        # L = n - 1 and L = n give the same count: one full fan-in factor cancels
        assert all(a < b or (a == b and L == n - 1)
                   for L, (a, b) in enumerate(zip(vals, vals[1:]), start=1))


@settings(max_examples=200, deadline=None)
@given(v=st.integers(1, 10**60))
def test_sci_round_is_correct_rounding(v):
    mant, exp = sci_round(v)
    assert Decimal(1) <= mant < Decimal(10)
    # the rounded value is within half a unit in the last place
    ulp = Decimal(10) ** (exp - 1)
    assert abs(Decimal(v) - mant * Decimal(10) ** exp) <= ulp / 2


def test_sci_round_half_even():
    assert sci_round(125) == (Decimal("1.2"), 2)
    assert sci_round(135) == (Decimal("1.4"), 2)
    assert sci_round(995) == (Decimal("1.0"), 3)


def test_report_json():
    d = count_space(4, [18, 20, 18]).to_dict()
    assert d["sci"] == "1.8e116" and int(d["exact_count"]) == math.prod(map(int, d["per_stage"]))


# trajectories


def test_constant_series_rank_fixed_from_start():
    s = summarize_trajectories({"a": [0.9] * 4, "b": [0.5] * 4, "c": [0.1] * 4}, ["a", "b", "c"])
    assert s.final_rank == {"a": 1, "b": 2, "c": 3}
    assert s.dominance_onset == {"a": 0, "b": None, "c": None}


def test_crossing_series_onset():
    s = summarize_trajectories({"a": [0.1, 0.2, 0.6, 0.7], "b": [0.5, 0.5, 0.5, 0.5]}, ["a", "b"])
    assert s.dominance_onset["a"] == 2  # crossing between index 1 and 2


def test_rows_form_and_csv():
    rows = [(it, c, g) for it in (0, 10, 20) for c, g in (("x", it / 100), ("y", 0.15))]
    s = summarize_trajectories(rows, ["x", "y"])
    assert s.iterations == [0, 10, 20] and s.dominance_onset["x"] == 20
    assert s.to_csv().splitlines()[0] == "connection,final_gate,final_rank,dominance_onset"


def test_missing_candidate():
    with pytest.raises(ValueError):
        summarize_trajectories({"a": [1.0]}, ["a", "b"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=20))
def test_ranks_are_permutations(cols):
    log = {c: [row[i] for row in cols] for i, c in enumerate("abc")}
    s = summarize_trajectories(log, list("abc"))
    assert all(sorted(r) == [1, 2, 3] for r in s.ranks)


# architecture statistics


def test_depth_stats():
    spec = SupernetSpec.uniform(2, [4], channels=4, spatial_size=4)
    c = lambda a, b: Connection(0, a, b)  # noqa: E731
    chain = chain_architecture(spec)
    assert depth_stats([chain, chain]) == (4.0, 0.0)
    skip2 = DiscreteArchitecture(spec, {(c(0, 2), Op.SKIP), (c(2, 4), Op.SKIP)})
    mixed = DiscreteArchitecture(spec, {(c(0, 2), Op.SKIP), (c(2, 3), Op.SKIP), (c(3, 4), Op.SKIP)})
    mean, std = depth_stats([chain, skip2, mixed])
    assert mean == pytest.approx(3.0) and std == pytest.approx(math.sqrt(2 / 3))
    with pytest.raises(ValueError):
        depth_stats([])


def test_param_count_of_skip_only_is_fixed():
    spec = SupernetSpec.uniform(2, [3, 3], channels=4, spatial_size=4, operator_set=(Op.SKIP,))
    assert param_count(chain_architecture(spec)) == fixed_params(spec)


# interference harness


def test_figure1_harness_small():
    cfg = Figure1Config(warmup_iterations=4, train_iterations=6)
    res = run_figure1(1, 0, cfg)
    assert res.injected == ["0:3-7"]
    assert len(res.rows) == (4 + 6) * 3
    assert interference_pairs(res) >= 1
    assert run_figure1(0, 0, cfg).injected == []
