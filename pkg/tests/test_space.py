import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifnas import io as archio
from ifnas.cost import fixed_madds, fixed_params, madds, minimal_madds, op_madds, param_count
from ifnas.space import (Connection, DiscreteArchitecture, InfeasibleBudget, InvalidArchitecture,
                         OperatorKind as Op, SpecError, StageSpec, SupernetSpec, build_supernet,
                         chain_architecture, cleanup, depth, random_architecture, validate)

from oracles import longest_path_bruteforce


def small_spec(L, nodes, ops=(Op.SEP_CONV_3X3, Op.SKIP)):
    return SupernetSpec.uniform(L, nodes, channels=4, spatial_size=8, operator_set=ops)


# supernet construction


@pytest.mark.parametrize("L", range(1, 9))
def test_connection_count_matches_enumeration(L):
    for n in range(L, 31):
        sn = build_supernet(small_spec(L, [n]))
        enumerated = {(i, j) for j in range(1, n + 1) for i in range(n + 1) if 1 <= j - i <= L}
        assert {(c.source, c.target) for c in sn.connections} == enumerated
        assert len(sn.connections) == sum(min(j, L) for j in range(1, n + 1))


def test_connections_are_canonically_ordered():
    sn = build_supernet(small_spec(3, [5, 4]))
    keys = [c.key for c in sn.connections]
    assert keys == sorted(keys)


def test_connection_str_round_trip():
    c = Connection(2, 3, 7)
    assert str(c) == "2:3-7"
    assert Connection.parse(str(c)) == c
    assert c.length() == 4 and not c.is_backbone()
    assert Connection(0, 4, 5).is_backbone()


@pytest.mark.parametrize("kwargs, field", [
    (dict(L=0, stages=(StageSpec(3, 4, 4, False),)), "L"),
    (dict(L=2, stages=()), "stages"),
    (dict(L=2, stages=(StageSpec(0, 4, 4, False),)), "stages[0].node_count"),
    (dict(L=2, stages=(StageSpec(3, 4, 8, True), StageSpec(3, 8, 8, False))), "stages[1].spatial_size"),
    (dict(L=2, stages=(StageSpec(3, 4, 4, True),)), "stages[0].reduction_after"),
    (dict(L=2, stages=(StageSpec(3, 4, 4, False),), operator_set=()), "operator_set"),
    (dict(L=2, stages=(StageSpec(3, 4, 4, False),), num_classes=1), "num_classes"),
])
def test_spec_errors_name_the_field(kwargs, field):
    with pytest.raises(SpecError) as e:
        SupernetSpec(**kwargs)
    assert e.value.field == field


def test_spec_dict_round_trip():
    spec = SupernetSpec.default(6)
    assert SupernetSpec.from_dict(spec.to_dict()) == spec
    assert [s.node_count for s in spec.stages] == [18, 20, 18]


# validity and cleanup


def test_chain_is_valid():
    assert validate(chain_architecture(small_spec(4, [6, 5]))) == []


def test_validate_reports_each_rule():
    spec = small_spec(2, [4])
    c = Connection
    dead = DiscreteArchitecture(spec, {(c(0, 0, 1), Op.SKIP), (c(0, 2, 4), Op.SKIP),
                                       (c(0, 1, 3), Op.SKIP)})
    kinds = {v.kind for v in validate(dead)}
    assert kinds == {"dead_source", "stage_output_disconnected"}
    out_of_range = DiscreteArchitecture(spec, {(c(0, 0, 3), Op.SKIP)})
    assert "invalid_pair" in {v.kind for v in validate(out_of_range)}


def test_cleanup_cascades():
    spec = small_spec(2, [5])
    c = Connection
    alive = {(c(0, 1, 2), Op.SKIP), (c(0, 2, 3), Op.SKIP), (c(0, 3, 5), Op.SKIP),
             (c(0, 0, 2), Op.SKIP), (c(0, 0, 1), Op.SKIP)}
    # node 1 alive: nothing removed
    assert cleanup(spec, alive) == frozenset(alive)
    # without (0,1) node 1 dies, its edge (1,2) goes; node 2 still fed by (0,2)
    kept = cleanup(spec, alive - {(c(0, 0, 1), Op.SKIP)})
    assert kept == frozenset(alive - {(c(0, 0, 1), Op.SKIP), (c(0, 1, 2), Op.SKIP)})
    # without any input to 2 the whole tail collapses
    tail = cleanup(spec, {(c(0, 1, 2), Op.SKIP), (c(0, 2, 3), Op.SKIP), (c(0, 3, 5), Op.SKIP)})
    assert tail == frozenset()


def test_cleanup_drop_unused_removes_dangling_branches():
    spec = small_spec(2, [3])
    c = Connection
    alive = {(c(0, 0, 1), Op.SKIP), (c(0, 1, 3), Op.SKIP), (c(0, 1, 2), Op.SKIP)}
    assert cleanup(spec, alive, drop_unused=True) == frozenset(alive - {(c(0, 1, 2), Op.SKIP)})


# depth


def test_depth_of_default_chain():
    assert depth(chain_architecture(SupernetSpec.default(4))) == 56


def test_depth_of_single_skip():
    spec = small_spec(2, [2])
    assert depth(DiscreteArchitecture(spec, {(Connection(0, 0, 2), Op.SKIP)})) == 1


def test_depth_rejects_invalid():
    spec = small_spec(2, [3])
    with pytest.raises(InvalidArchitecture):
        depth(DiscreteArchitecture(spec, {(Connection(0, 0, 1), Op.SKIP)}))


@settings(max_examples=150, deadline=None)
@given(L=st.integers(1, 5), n=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_depth_matches_bruteforce_longest_path(L, n, seed):
    if n < L:
        L = n
    spec = small_spec(L, [n])
    arch = random_architecture(spec, seed)
    edges = {(c.source, c.target) for c in arch.connections()}
    assert depth(arch) == longest_path_bruteforce(edges, n)


# random baseline


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**6), one_input=st.booleans(), frac=st.floats(0.0, 1.0),
       conv_only=st.booleans())
def test_random_architectures_are_valid_and_fit_budget(seed, one_input, frac, conv_only):
    if one_input and conv_only:
        one_input = False  # one input per node cannot drop nodes, so the floor differs
    spec = small_spec(3, [7, 5], ops=(Op.SEP_CONV_3X3,) if conv_only else (Op.SEP_CONV_3X3, Op.SKIP))
    lo = minimal_madds(spec)
    hi = madds(chain_architecture(spec))
    budget = int(lo + frac * (hi - lo))
    arch = random_architecture(spec, seed, budget, one_input_per_node=one_input)
    assert validate(arch) == []
    assert madds(arch) <= budget
    if one_input:
        targets = [(c.stage, c.target) for c, _ in arch.alive]
        assert len(targets) == len(set(targets))


def test_random_architecture_is_seed_deterministic():
    spec = small_spec(4, [8])
    assert random_architecture(spec, 11) == random_architecture(spec, 11)


def test_random_architecture_rejects_infeasible_budget():
    spec = small_spec(2, [4], ops=(Op.SEP_CONV_3X3,))
    with pytest.raises(InfeasibleBudget):
        random_architecture(spec, 0, minimal_madds(spec) - 1)


# costs


def test_op_costs():
    spec = small_spec(2, [3])  # C=4, 8x8
    assert op_madds(spec, 0, Op.SEP_CONV_3X3) == 64 * 4 * 9 + 64 * 4 * 4
    assert op_madds(spec, 0, Op.SKIP) == 0


def test_skip_only_params_are_fixed_parts():
    spec = small_spec(2, [3, 3], ops=(Op.SKIP,))
    arch = chain_architecture(spec)
    assert param_count(arch) == fixed_params(spec)
    assert madds(arch) == fixed_madds(spec)


def test_minimal_madds_is_attained():
    spec = small_spec(3, [7], ops=(Op.SEP_CONV_3X3,))
    c = Connection
    path = {(c(0, 0, 1), Op.SEP_CONV_3X3), (c(0, 1, 4), Op.SEP_CONV_3X3),
            (c(0, 4, 7), Op.SEP_CONV_3X3)}
    arch = DiscreteArchitecture(spec, path)
    assert validate(arch) == [] and madds(arch) == minimal_madds(spec)


# architecture files


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_json_round_trip(seed):
    spec = small_spec(3, [6, 4])
    arch = random_architecture(spec, seed)
    text = archio.export_json(arch)
    assert archio.import_json(text) == arch
    assert archio.export_json(archio.import_json(text)) == text


def test_json_records_node_indexing_and_version():
    d = json.loads(archio.export_json(chain_architecture(small_spec(2, [3]))))
    assert d["version"] == archio.VERSION and "stage input" in d["node_indexing"]
    assert d["alive"][0] == [0, 0, 1, "SepConv3x3"]


def test_malformed_json_reports_line_and_column():
    with pytest.raises(archio.ParseError) as e:
        archio.import_json('{\n  "version": 1,\n  "alive": [\n}')
    assert e.value.location.startswith("4:")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), row=st.integers(0, 100), bump=st.integers(1, 50))
def test_fuzzed_out_of_range_target_is_rejected(seed, row, bump):
    spec = small_spec(3, [6, 4])
    d = archio.to_dict(random_architecture(spec, seed))
    i = row % len(d["alive"])
    stage = d["alive"][i][0]
    d["alive"][i][2] = spec.stages[stage].node_count + bump
    with pytest.raises(archio.ParseError) as e:
        archio.from_dict(d)
    assert e.value.location == f"alive[{i}]"


@pytest.mark.parametrize("mutate, location", [
    (lambda d: d.pop("spec"), "spec"),
    (lambda d: d.update(version=99), "version"),
    (lambda d: d["alive"][0].__setitem__(3, "Conv7x7"), "alive[0][3]"),
    (lambda d: d["alive"][1].__setitem__(1, "x"), "alive[1][1]"),
    (lambda d: d["alive"].append(list(d["alive"][0])), "alive[3]"),
    (lambda d: d["spec"].update(L=0), "spec.L"),
])
def test_schema_errors_carry_location(mutate, location):
    d = archio.to_dict(chain_architecture(small_spec(2, [3])))
    mutate(d)
    with pytest.raises(archio.ParseError) as e:
        archio.from_dict(d)
    assert e.value.location == location


def test_dot_export_of_chain():
    spec = small_spec(3, [5, 4, 6])
    dot = archio.export_dot(chain_architecture(spec))
    for s, n in enumerate([5, 4, 6]):
        solid = [ln for ln in dot.splitlines() if f"s{s}_" in ln and "->" in ln and "dashed" not in ln]
        assert len(solid) == n
    assert dot.count("style=dashed") == 2
    assert archio.export_dot(chain_architecture(spec)) == dot


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dot_has_no_dangling_nodes_and_is_topological(seed):
    arch = random_architecture(small_spec(3, [6, 4]), seed)
    lines = archio.export_dot(arch).splitlines()
    declared, order = set(), {}
    for ln in lines:
        ln = ln.strip()
        if "[label=" in ln and "->" not in ln:
            name = ln.split()[0]
            order[name] = len(order)
            declared.add(name)
    for ln in lines:
        if "->" in ln:
            a, _, b = ln.split()[:3]
            assert a in declared and b in declared
            if a.split("_")[0] == b.split("_")[0]:
                assert order[a] < order[b]
    assert len([ln for ln in lines if "->" in ln and "dashed" not in ln]) == len(arch.alive)
