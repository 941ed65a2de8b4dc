"""Interleaved connections and interleaving-free sampling.

Two non-backbone connections ``(a, b)`` and ``(a', b')`` of one stage
interleave when their open index intervals overlap, i.e. some half-integer
``d + 1/2`` lies strictly inside both. Connections that end at the same node
never interleave: they are the competing candidates of that node.

Grouping targets by their index modulo ``L`` yields ``L`` sub-supernets that
each keep the backbone plus every connection ending in one group; none of
them contains an interleaved pair.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

from ifnas.space import Connection, Supernet

WARMUP = "warmup"
GROUP = "group"
FULL = "full"

# Fig.1-style interference pattern, in injection order.
FIGURE1_PATTERN = ((3, 7), (1, 4), (2, 6))


class InfeasibleInjection(ValueError):
    pass


@dataclass(frozen=True)
class InterleavePair:
    first: Connection
    second: Connection

    def __str__(self):
        return f"{self.first} x {self.second}"


@dataclass(frozen=True)
class SampleMask:
    active: frozenset
    kind: str = FULL
    group: int | None = None

    @property
    def label(self) -> str:
        return f"G{self.group}" if self.kind == GROUP else self.kind

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind, "group": self.group,
                "active": [str(c) for c in sorted(self.active)]}


@dataclass(frozen=True)
class Phase:
    kind: str
    group: int | None
    iterations: int

    @property
    def label(self) -> str:
        return f"G{self.group}" if self.kind == GROUP else self.kind


@dataclass(frozen=True)
class Schedule:
    L: int
    phases: tuple[Phase, ...]

    @property
    def loop_length(self) -> int:
        return self.L + 1

    def loops(self) -> list[tuple[Phase, ...]]:
        n = self.loop_length
        return [self.phases[i:i + n] for i in range(0, len(self.phases), n)]

    def to_dict(self) -> dict:
        return {"L": self.L, "loop_length": self.loop_length,
                "phases": [[p.label, p.iterations] for p in self.phases]}


def interleaves(c1: Connection, c2: Connection, exempt_same_target: bool = True) -> bool:
    if c1.stage != c2.stage:
        raise ValueError(f"connections {c1} and {c2} are in different stages")
    if c1.is_backbone() or c2.is_backbone():
        return False
    if exempt_same_target and c1.target == c2.target:
        return False
    return max(c1.source, c2.source) < min(c1.target, c2.target)


def interleaves_by_enumeration(c1: Connection, c2: Connection) -> bool:
    """Literal form: search for an integer d with a < d+1/2 < b and a' < d+1/2 < b'."""
    if c1.is_backbone() or c2.is_backbone() or c1.target == c2.target:
        return False
    lo = min(c1.source, c2.source) - 1
    hi = max(c1.target, c2.target) + 1
    return any(c1.source < d + 0.5 < c1.target and c2.source < d + 0.5 < c2.target
               for d in range(lo, hi))


def _canonical(c1, c2) -> InterleavePair:
    return InterleavePair(*sorted((c1, c2)))


def _pair_sort_key(p: InterleavePair):
    return (p.first.key, p.second.key)


def find_interleaved_pairs_bruteforce(conns: Iterable[Connection],
                                      exempt_same_target: bool = True) -> list[InterleavePair]:
    conns = sorted(set(conns))
    out = [_canonical(a, b) for a, b in itertools.combinations(conns, 2)
           if a.stage == b.stage and interleaves(a, b, exempt_same_target)]
    return sorted(out, key=_pair_sort_key)


def find_interleaved_pairs(conns: Iterable[Connection],
                           exempt_same_target: bool = True) -> list[InterleavePair]:
    """Sweep over sources; each connection is compared only with intervals still open."""
    by_stage: dict[int, list[Connection]] = {}
    for c in set(conns):
        if not c.is_backbone():
            by_stage.setdefault(c.stage, []).append(c)
    out = []
    for stage_conns in by_stage.values():
        stage_conns.sort(key=lambda c: (c.source, c.target))
        ends: list[tuple[int, Connection]] = []  # open intervals sorted by target
        for c in stage_conns:
            # drop intervals that closed at or before this source
            cut = bisect.bisect_right(ends, c.source, key=lambda e: e[0])
            del ends[:cut]
            for _, other in ends:
                if exempt_same_target and other.target == c.target:
                    continue
                out.append(_canonical(other, c))
            bisect.insort(ends, (c.target, c), key=lambda e: (e[0], e[1].key))
    return sorted(out, key=_pair_sort_key)


def group_of(c: Connection, L: int) -> int:
    if c.is_backbone():
        raise ValueError(f"backbone connection {c} belongs to every group")
    return (c.target - 1) % L + 1


def full_mask(supernet: Supernet, kind: str = FULL) -> SampleMask:
    return SampleMask(supernet.connection_set, kind)


def extract_subsupernet(supernet: Supernet, lam: int) -> SampleMask:
    L = supernet.spec.L
    if not 1 <= lam <= L:
        raise ValueError(f"group index {lam} outside 1..{L}")
    active = frozenset(c for c in supernet.connections
                       if c.is_backbone() or group_of(c, L) == lam)
    return SampleMask(active, GROUP, lam)


def is_interleaving_free(mask: SampleMask | Iterable[Connection]) -> bool:
    active = mask.active if isinstance(mask, SampleMask) else mask
    return not find_interleaved_pairs(active)


def make_schedule(L: int, iterations_per_step: int = 100, total_loops: int = 1) -> Schedule:
    for name, v in (("L", L), ("iterations_per_step", iterations_per_step),
                    ("total_loops", total_loops)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    loop = [Phase(WARMUP, None, iterations_per_step)]
    loop += [Phase(GROUP, lam, iterations_per_step) for lam in range(1, L + 1)]
    return Schedule(L, tuple(loop * total_loops))


def mask_for_phase(supernet: Supernet, phase: Phase) -> SampleMask:
    if phase.kind == GROUP:
        return extract_subsupernet(supernet, phase.group)
    return full_mask(supernet, phase.kind)


def inject_interleaves(mask: SampleMask, k: int, target_candidates: Sequence[Connection],
                       supernet: Supernet,
                       preferred: Sequence[tuple[int, int]] = FIGURE1_PATTERN) -> SampleMask:
    """Add ``k`` connections that each interleave with at least one candidate.

    Connections from ``preferred`` are tried first (in order), then every
    other supernet connection in canonical order.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return mask
    if not target_candidates:
        raise InfeasibleInjection("no candidate connections given")
    stage = target_candidates[0].stage
    pool = [Connection(stage, a, b) for a, b in preferred]
    pool += [c for c in supernet.by_stage[stage] if c not in pool]
    added: list[Connection] = []
    for c in pool:
        if len(added) == k:
            break
        if c not in supernet.connection_set or c in mask.active or c in target_candidates:
            continue
        if any(interleaves(c, cand) for cand in target_candidates):
            added.append(c)
    if len(added) < k:
        raise InfeasibleInjection(
            f"only {len(added)} of {k} interfering connections are available")
    return SampleMask(mask.active | frozenset(added), mask.kind, mask.group)
