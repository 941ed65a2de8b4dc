"""The L-chain macro search space.

Each stage is a chain of ``N`` searched nodes ``1..N`` fed by a stage input
node ``0``. Node ``j`` may receive a connection from any of its ``L`` nearest
precursors, and every connection carries a subset of the candidate operators.
Stages are joined by fixed (non-searched) reduction units.
"""

from __future__ import annotations

import functools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np


class SpecError(ValueError):
    """An invalid :class:`SupernetSpec`; ``field`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class InvalidArchitecture(ValueError):
    pass


class InfeasibleBudget(ValueError):
    pass


class OperatorKind(str, Enum):
    SEP_CONV_3X3 = "SepConv3x3"
    SKIP = "Skip"
    TOY_LINEAR = "ToyLinear"

    def __str__(self):
        return self.value


DEFAULT_OPERATORS = (OperatorKind.SEP_CONV_3X3, OperatorKind.SKIP)


@dataclass(frozen=True)
class StageSpec:
    node_count: int
    channels: int
    spatial_size: int
    reduction_after: bool = True


@dataclass(frozen=True)
class SupernetSpec:
    L: int
    stages: tuple[StageSpec, ...]
    operator_set: tuple[OperatorKind, ...] = DEFAULT_OPERATORS
    in_channels: int = 3
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(
            self, "operator_set", tuple(OperatorKind(o) for o in self.operator_set))
        self.check()

    def check(self):
        if not isinstance(self.L, int) or self.L < 1:
            raise SpecError("L", f"must be a positive integer, got {self.L!r}")
        if not self.stages:
            raise SpecError("stages", "at least one stage is required")
        if not self.operator_set:
            raise SpecError("operator_set", "must be non-empty")
        if len(set(self.operator_set)) != len(self.operator_set):
            raise SpecError("operator_set", "contains duplicates")
        if self.in_channels < 1:
            raise SpecError("in_channels", "must be positive")
        if self.num_classes < 2:
            raise SpecError("num_classes", "must be at least 2")
        for s, st in enumerate(self.stages):
            for name in ("node_count", "channels", "spatial_size"):
                v = getattr(st, name)
                if not isinstance(v, (int, np.integer)) or v < 1:
                    raise SpecError(f"stages[{s}].{name}", f"must be a positive integer, got {v!r}")
            if s + 1 < len(self.stages):
                nxt = self.stages[s + 1]
                want = math.ceil(st.spatial_size / 2) if st.reduction_after else st.spatial_size
                if nxt.spatial_size != want:
                    raise SpecError(
                        f"stages[{s + 1}].spatial_size",
                        f"expected {want} after stage {s} (reduction_after={st.reduction_after})")
            elif st.reduction_after:
                raise SpecError(f"stages[{s}].reduction_after", "last stage cannot reduce")

    @classmethod
    def default(cls, L: int = 4, **kw) -> "SupernetSpec":
        """Three stages with 18/20/18 searched nodes."""
        stages = (
            StageSpec(18, 16, 32, True),
            StageSpec(20, 32, 16, True),
            StageSpec(18, 64, 8, False),
        )
        return cls(L=L, stages=stages, **kw)

    @classmethod
    def uniform(cls, L: int, node_counts: Iterable[int], channels: int = 4,
                spatial_size: int = 4, **kw) -> "SupernetSpec":
        """Stages with a doubling channel plan and stride-2 transitions."""
        node_counts = list(node_counts)
        stages = []
        c, sp = channels, spatial_size
        for i, n in enumerate(node_counts):
            last = i == len(node_counts) - 1
            stages.append(StageSpec(int(n), c, sp, not last))
            c, sp = c * 2, math.ceil(sp / 2)
        return cls(L=L, stages=tuple(stages), **kw)

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "stages": [
                {"node_count": s.node_count, "channels": s.channels,
                 "spatial_size": s.spatial_size, "reduction_after": s.reduction_after}
                for s in self.stages
            ],
            "operator_set": [o.value for o in self.operator_set],
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetSpec":
        return cls(
            L=d["L"],
            stages=tuple(StageSpec(**s) for s in d["stages"]),
            operator_set=tuple(OperatorKind(o) for o in d["operator_set"]),
            in_channels=d.get("in_channels", 3),
            num_classes=d.get("num_classes", 10),
        )


@functools.total_ordering
@dataclass(frozen=True)
class Connection:
    stage: int
    source: int
    target: int

    @property
    def key(self):
        return (self.stage, self.target, self.source)

    def __lt__(self, other):
        return self.key < other.key

    def length(self) -> int:
        return self.target - self.source

    def is_backbone(self) -> bool:
        return self.target - self.source == 1

    def __str__(self):
        return f"{self.stage}:{self.source}-{self.target}"

    @classmethod
    def parse(cls, text: str) -> "Connection":
        stage, rest = text.split(":")
        src, tgt = rest.split("-")
        return cls(int(stage), int(src), int(tgt))


Pair = tuple[Connection, OperatorKind]


def pair_key(pair: Pair):
    c, o = pair
    return (c.key, o.value)


def sorted_pairs(pairs: Iterable[Pair]) -> list[Pair]:
    return sorted(pairs, key=pair_key)


@dataclass(frozen=True)
class Supernet:
    spec: SupernetSpec
    connections: tuple[Connection, ...]

    @functools.cached_property
    def by_stage(self) -> tuple[tuple[Connection, ...], ...]:
        out = [[] for _ in self.spec.stages]
        for c in self.connections:
            out[c.stage].append(c)
        return tuple(tuple(x) for x in out)

    @functools.cached_property
    def incoming(self) -> dict[tuple[int, int], tuple[Connection, ...]]:
        d = defaultdict(list)
        for c in self.connections:
            d[(c.stage, c.target)].append(c)
        return {k: tuple(v) for k, v in d.items()}

    @functools.cached_property
    def connection_set(self) -> frozenset[Connection]:
        return frozenset(self.connections)

    def all_pairs(self) -> list[Pair]:
        return [(c, o) for c in self.connections for o in self.spec.operator_set]

    def backbone(self) -> list[Connection]:
        return [c for c in self.connections if c.is_backbone()]


def build_supernet(spec: SupernetSpec) -> Supernet:
    spec.check()
    conns = []
    for s, st in enumerate(spec.stages):
        for j in range(1, st.node_count + 1):
            for i in range(max(0, j - spec.L), j):
                conns.append(Connection(s, i, j))
    return Supernet(spec, tuple(conns))


@dataclass(frozen=True)
class DiscreteArchitecture:
    spec: SupernetSpec
    alive: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "alive", frozenset(self.alive))

    def connections(self) -> set[Connection]:
        return {c for c, _ in self.alive}

    def pairs(self) -> list[Pair]:
        return sorted_pairs(self.alive)


@dataclass(frozen=True)
class Violation:
    kind: str
    stage: int
    node: int | None = None
    detail: str = ""

    def __str__(self):
        where = f"stage {self.stage}" + (f" node {self.node}" if self.node is not None else "")
        return f"{self.kind} at {where}: {self.detail}" if self.detail else f"{self.kind} at {where}"


def _stage_edges(alive_conns: Iterable[Connection], n_stages: int):
    ins = [defaultdict(set) for _ in range(n_stages)]
    outs = [defaultdict(set) for _ in range(n_stages)]
    for c in alive_conns:
        ins[c.stage][c.target].add(c.source)
        outs[c.stage][c.source].add(c.target)
    return ins, outs


def reachable_from_input(outs: dict[int, set[int]], n: int) -> list[bool]:
    seen = [False] * (n + 1)
    seen[0] = True
    for i in range(n + 1):
        if seen[i]:
            for j in outs.get(i, ()):
                seen[j] = True
    return seen


def output_reachable(conns: Iterable[Connection], spec: SupernetSpec, stage: int) -> bool:
    outs = defaultdict(set)
    for c in conns:
        if c.stage == stage:
            outs[c.source].add(c.target)
    n = spec.stages[stage].node_count
    return reachable_from_input(outs, n)[n]


def validate(arch: DiscreteArchitecture) -> list[Violation]:
    """Return every violated validity rule; an empty list means valid."""
    spec = arch.spec
    out: list[Violation] = []
    n_stages = len(spec.stages)
    per_node_pairs = defaultdict(int)
    for c, o in arch.pairs():
        bad = (not 0 <= c.stage < n_stages or o not in spec.operator_set)
        if not bad:
            n = spec.stages[c.stage].node_count
            bad = not (0 <= c.source < c.target <= n and c.target - c.source <= spec.L)
        if bad:
            out.append(Violation("invalid_pair", max(c.stage, 0), c.target, f"{c} {o}"))
            continue
        per_node_pairs[(c.stage, c.target)] += 1
    conns = {c for c, o in arch.alive
             if 0 <= c.stage < n_stages and o in spec.operator_set
             and 0 <= c.source < c.target <= spec.stages[c.stage].node_count}
    ins, outs = _stage_edges(conns, n_stages)
    for s, st in enumerate(spec.stages):
        n = st.node_count
        for i in sorted(outs[s]):
            if i != 0 and not ins[s].get(i):
                out.append(Violation("dead_source", s, i,
                                     "node has alive outgoing pairs but no alive input"))
        if not ins[s].get(n) or not reachable_from_input(outs[s], n)[n]:
            out.append(Violation("stage_output_disconnected", s, n,
                                 "no directed path from the stage input to the stage output"))
    for (s, j), cnt in sorted(per_node_pairs.items()):
        if cnt > 2 * spec.L:
            out.append(Violation("too_many_inputs", s, j, f"{cnt} > 2L={2 * spec.L}"))
    return out


def is_valid(arch: DiscreteArchitecture) -> bool:
    return not validate(arch)


def cleanup(spec: SupernetSpec, alive: Iterable[Pair], drop_unused: bool = False) -> frozenset:
    """Delete dead nodes until a fixed point is reached.

    A searched node with no alive input is deleted together with its outgoing
    pairs, which may cascade downstream. With ``drop_unused`` the symmetric
    rule also runs: a non-output node whose value feeds nothing is deleted
    with its incoming pairs.
    """
    alive = set(alive)
    while True:
        conns = {c for c, _ in alive}
        ins, outs = _stage_edges(conns, len(spec.stages))
        dead = set()
        for c, o in alive:
            if c.source != 0 and not ins[c.stage].get(c.source):
                dead.add((c, o))
            elif (drop_unused and c.target != spec.stages[c.stage].node_count
                  and not outs[c.stage].get(c.target)):
                dead.add((c, o))
        if not dead:
            return frozenset(alive)
        alive -= dead


def depth(arch: DiscreteArchitecture) -> int:
    """Sum over stages of the longest input-to-output path, counted in edges."""
    violations = validate(arch)
    if violations:
        raise InvalidArchitecture("; ".join(map(str, violations)))
    total = 0
    ins, _ = _stage_edges(arch.connections(), len(arch.spec.stages))
    for s, st in enumerate(arch.spec.stages):
        n = st.node_count
        best = [-1] * (n + 1)
        best[0] = 0
        for j in range(1, n + 1):
            cands = [best[i] for i in ins[s].get(j, ()) if best[i] >= 0]
            if cands:
                best[j] = max(cands) + 1
        total += best[n]
    return total


def chain_architecture(spec: SupernetSpec, op: OperatorKind | None = None) -> DiscreteArchitecture:
    op = op or spec.operator_set[0]
    alive = {(Connection(s, j - 1, j), op)
             for s, st in enumerate(spec.stages) for j in range(1, st.node_count + 1)}
    return DiscreteArchitecture(spec, frozenset(alive))


def _repair_output(spec, alive: set, stage: int, rng) -> None:
    n = spec.stages[stage].node_count
    conns = {c for c, _ in alive if c.stage == stage}
    outs = defaultdict(set)
    for c in conns:
        outs[c.source].add(c.target)
    seen = reachable_from_input(outs, n)
    j = n
    while not seen[j]:
        op = spec.operator_set[int(rng.integers(len(spec.operator_set)))]
        alive.add((Connection(stage, j - 1, j), op))
        j -= 1


def random_architecture(spec: SupernetSpec, rng_seed: int, madds_budget: int | None = None,
                        one_input_per_node: bool = False, p: float = 0.5) -> DiscreteArchitecture:
    """Random baseline architecture.

    Default mode toggles every (connection, operator) pair with probability
    ``p``, removes dead nodes and repairs the stage output with backbone edges.
    ``one_input_per_node`` instead gives every searched node exactly one
    randomly chosen precursor carrying one random operator. A budget removes
    random pairs until the cost fits, never breaking validity.
    """
    from ifnas.cost import madds, minimal_madds

    if madds_budget is not None and madds_budget < minimal_madds(spec):
        raise InfeasibleBudget(
            f"budget {madds_budget} below minimal valid cost {minimal_madds(spec)}")
    rng = np.random.default_rng(rng_seed)
    supernet = build_supernet(spec)
    if one_input_per_node:
        alive = set()
        for s, st in enumerate(spec.stages):
            for j in range(1, st.node_count + 1):
                srcs = [c for c in supernet.incoming[(s, j)]]
                c = srcs[int(rng.integers(len(srcs)))]
                o = spec.operator_set[int(rng.integers(len(spec.operator_set)))]
                alive.add((c, o))
        alive = set(cleanup(spec, alive))
    else:
        pairs = supernet.all_pairs()
        keep = rng.random(len(pairs)) < p
        alive = {pr for pr, k in zip(pairs, keep) if k}
        alive = set(cleanup(spec, alive))
        for s in range(len(spec.stages)):
            _repair_output(spec, alive, s, rng)
        alive = set(cleanup(spec, alive))
    if madds_budget is not None:
        alive = _shrink_to_budget(spec, alive, madds_budget, rng, keep_one_input=one_input_per_node)
    arch = DiscreteArchitecture(spec, frozenset(alive))
    assert not validate(arch), validate(arch)
    return arch


def _cheapest_path(spec: SupernetSpec, stage: int) -> set:
    """Hops of length L (the first one shorter) carrying the cheapest operator."""
    from ifnas.cost import op_madds

    op = min(spec.operator_set, key=lambda k: (op_madds(spec, stage, k), k.value))
    n, path = spec.stages[stage].node_count, set()
    j = n
    while j > 0:
        path.add((Connection(stage, max(0, j - spec.L), j), op))
        j -= spec.L
    return path


def _shrink_to_budget(spec, alive: set, budget: int, rng, keep_one_input=False) -> set:
    from ifnas.cost import madds, op_madds

    alive = set(alive)
    protected: set = set()
    while madds(DiscreteArchitecture(spec, alive)) > budget:
        if keep_one_input:
            # every node keeps its single input; only the operator may get cheaper
            cheapest = {s: min(op_madds(spec, s, k) for k in spec.operator_set)
                        for s in range(len(spec.stages))}
            costly = [pr for pr in sorted_pairs(alive)
                      if op_madds(spec, pr[0].stage, pr[1]) > cheapest[pr[0].stage]]
            if not costly:
                raise InfeasibleBudget(f"cannot reach budget {budget} with one input per node")
            c, o = costly[int(rng.integers(len(costly)))]
            best = min(spec.operator_set, key=lambda k: op_madds(spec, c.stage, k))
            alive = (alive - {(c, o)}) | {(c, best)}
            continue
        order = [pr for pr in sorted_pairs(alive) if pr not in protected]
        rng.shuffle(order)
        for pr in order:
            trial = set(cleanup(spec, alive - {pr}))
            if all(output_reachable({c for c, _ in trial}, spec, s)
                   for s in range(len(spec.stages))):
                alive = trial
                break
        else:
            # stuck on an expensive path: route the costliest stage through its
            # cheapest path, protect that path and keep removing around it
            stages = [s for s in range(len(spec.stages))
                      if not any(pr[0].stage == s for pr in protected)]
            if not stages:
                raise InfeasibleBudget(f"cannot reach budget {budget} while staying valid")
            stage = max(stages, key=lambda s: sum(op_madds(spec, s, o) for c, o in alive
                                                   if c.stage == s))
            path = _cheapest_path(spec, stage)
            protected |= path
            alive |= path
    return alive
