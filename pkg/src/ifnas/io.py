"""Architecture files: versioned JSON and Graphviz DOT.

The JSON schema is ``{"format", "version", "node_indexing", "spec", "alive"}``
with ``alive`` a list of ``[stage, source, target, "op"]`` rows in canonical
order. Node 0 of every stage is the stage input and is not counted among the
``node_count`` searched nodes.
"""

from __future__ import annotations

import json
from typing import Any

from ifnas.space import (Connection, DiscreteArchitecture, OperatorKind, SpecError,
                         SupernetSpec, build_supernet, sorted_pairs)

FORMAT = "ifnas-architecture"
VERSION = 1
NODE_INDEXING = "node 0 is the stage input; searched nodes are 1..node_count"


class ParseError(ValueError):
    """Malformed architecture file; ``location`` is a JSON path or ``line:col``."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


def to_dict(arch: DiscreteArchitecture) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "node_indexing": NODE_INDEXING,
        "spec": arch.spec.to_dict(),
        "alive": [[c.stage, c.source, c.target, o.value] for c, o in arch.pairs()],
    }


def export_json(arch: DiscreteArchitecture) -> str:
    return json.dumps(to_dict(arch), indent=2, sort_keys=True) + "\n"


def _spec_from(d: Any) -> SupernetSpec:
    if not isinstance(d, dict):
        raise ParseError("spec", "expected an object")
    try:
        return SupernetSpec.from_dict(d)
    except SpecError as e:
        raise ParseError(f"spec.{e.field}", str(e)) from None
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError("spec", f"invalid spec ({e})") from None


def from_dict(d: Any) -> DiscreteArchitecture:
    if not isinstance(d, dict):
        raise ParseError("$", "expected an object")
    if d.get("format", FORMAT) != FORMAT:
        raise ParseError("format", f"unknown format {d.get('format')!r}")
    if d.get("version") != VERSION:
        raise ParseError("version", f"unsupported version {d.get('version')!r}")
    for key in ("spec", "alive"):
        if key not in d:
            raise ParseError(key, "missing")
    spec = _spec_from(d["spec"])
    known = build_supernet(spec).connection_set
    if not isinstance(d["alive"], list):
        raise ParseError("alive", "expected a list")
    pairs = set()
    for i, row in enumerate(d["alive"]):
        where = f"alive[{i}]"
        if not isinstance(row, list) or len(row) != 4:
            raise ParseError(where, "expected [stage, source, target, op]")
        for j in range(3):
            if not isinstance(row[j], int) or isinstance(row[j], bool):
                raise ParseError(f"{where}[{j}]", f"expected an integer, got {row[j]!r}")
        c = Connection(*row[:3])
        if c not in known:
            raise ParseError(where, f"connection {c} is not in the supernet")
        try:
            op = OperatorKind(row[3])
        except ValueError:
            raise ParseError(f"{where}[3]", f"unknown operator {row[3]!r}") from None
        if op not in spec.operator_set:
            raise ParseError(f"{where}[3]", f"operator {op} is not in the operator set")
        if (c, op) in pairs:
            raise ParseError(where, f"duplicate pair {c} {op}")
        pairs.add((c, op))
    return DiscreteArchitecture(spec, frozenset(pairs))


def import_json(text: str) -> DiscreteArchitecture:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{e.lineno}:{e.colno}", e.msg) from None
    return from_dict(d)


def export_dot(arch: DiscreteArchitecture, name: str = "architecture") -> str:
    """DOT graph with one cluster per stage and one edge per alive pair.

    Nodes are emitted in index order, which is a topological order since every
    edge goes from a lower to a higher index. Reduction units appear as dashed
    edges from a stage output to the next stage input.
    """
    spec = arch.spec
    by_stage: dict[int, list] = {s: [] for s in range(len(spec.stages))}
    for c, o in sorted_pairs(arch.alive):
        by_stage[c.stage].append((c, o))
    lines = [f'digraph "{name}" {{', "  rankdir=LR;", "  node [shape=box];"]
    for s, st in enumerate(spec.stages):
        used = {0, st.node_count}
        for c, _ in by_stage[s]:
            used.update((c.source, c.target))
        lines.append(f"  subgraph cluster_s{s} {{")
        lines.append(f'    label="stage {s}";')
        for n in sorted(used):
            lines.append(f'    s{s}_{n} [label="{n}"];')
        for c, o in by_stage[s]:
            style = ', style=bold' if c.is_backbone() else ""
            lines.append(f'    s{s}_{c.source} -> s{s}_{c.target} [label="{o.value}"{style}];')
        lines.append("  }")
    for s in range(len(spec.stages) - 1):
        lines.append(f'  s{s}_{spec.stages[s].node_count} -> s{s + 1}_0 '
                     f'[style=dashed, label="reduce"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dump_masks(supernet, masks) -> str:
    """JSON list of sample masks, for audit logs."""
    return json.dumps({"spec": supernet.spec.to_dict(), "masks": [m.to_dict() for m in masks]},
                      indent=2, sort_keys=True) + "\n"


def audit_sets(d: Any) -> list[tuple[str, list[Connection]]]:
    """``(label, connections)`` for every mask of a mask dump, or the one architecture."""
    if isinstance(d, dict) and "masks" in d:
        masks = d["masks"]
        if not isinstance(masks, list):
            raise ParseError("masks", "expected a list")
        out = []
        for i, m in enumerate(masks):
            try:
                conns = sorted(Connection.parse(s) for s in m["active"])
                out.append((str(m.get("label", i)), conns))
            except (KeyError, TypeError, ValueError, AttributeError) as e:
                raise ParseError(f"masks[{i}].active", f"bad connection list ({e})") from None
        return out
    return [("architecture", sorted(from_dict(d).connections()))]
