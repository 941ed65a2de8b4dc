"""Search-space cardinality, architecture statistics and gate-trajectory summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from typing import Iterable, Mapping, Sequence

import numpy as np

from ifnas.cost import param_count
from ifnas.space import DiscreteArchitecture, depth

__all__ = [
    "ComplexityReport", "count_space", "stage_count", "sci_round", "TrajectorySummary",
    "summarize_trajectories", "depth_stats", "param_count",
]


def stage_count(L: int, n: int, n_ops: int = 2, formula: str = "literal") -> int:
    """Architectures of one stage with ``n`` searched nodes.

    Node ``k`` with ``k`` available precursors has ``2**(n_ops*k) - 1``
    non-empty input choices. ``literal`` counts ``n - L`` nodes at full fan-in;
    ``prose`` counts every node ``k >= L`` at full fan-in (``n - L + 1``).
    """
    if L < 1 or n < L:
        raise ValueError(f"need 1 <= L <= N, got L={L}, N={n}")
    if formula not in ("literal", "prose"):
        raise ValueError(f"unknown formula {formula!r}")
    total = 1
    for k in range(1, L):
        total *= 2 ** (n_ops * k) - 1
    full = n - L + (1 if formula == "prose" else 0)
    return total * (2 ** (n_ops * L) - 1) ** full


def sci_round(value: int, digits: int = 2) -> tuple[Decimal, int]:
    """Mantissa with ``digits`` significant figures (half-even) and decimal exponent."""
    if value == 0:
        return Decimal(0), 0
    exp = len(str(abs(value))) - 1
    with localcontext() as ctx:
        ctx.prec = len(str(abs(value))) + 5
        mant = (Decimal(value) / Decimal(10) ** exp).quantize(
            Decimal(1).scaleb(-(digits - 1)), rounding=ROUND_HALF_EVEN)
    if abs(mant) >= 10:
        mant, exp = (mant / 10).quantize(Decimal(1).scaleb(-(digits - 1)),
                                         rounding=ROUND_HALF_EVEN), exp + 1
    return mant, exp


@dataclass(frozen=True)
class ComplexityReport:
    L: int
    stage_node_counts: tuple[int, ...]
    exact_count: int
    per_stage: tuple[int, ...]
    mantissa: Decimal
    exponent: int
    formula: str = "literal"

    @property
    def sci(self) -> str:
        if self.exponent < 2:
            return str(self.exact_count)
        return f"{self.mantissa}e{self.exponent}"

    def to_dict(self) -> dict:
        return {
            "L": self.L, "stages": list(self.stage_node_counts), "formula": self.formula,
            "exact_count": str(self.exact_count), "per_stage": [str(x) for x in self.per_stage],
            "sci": self.sci, "mantissa": str(self.mantissa), "exponent": self.exponent,
        }


def count_space(L: int, stage_node_counts: Sequence[int], n_ops: int = 2,
                formula: str = "literal", digits: int = 2) -> ComplexityReport:
    per = tuple(stage_count(L, n, n_ops, formula) for n in stage_node_counts)
    total = math.prod(per)
    mant, exp = sci_round(total, digits)
    return ComplexityReport(L, tuple(stage_node_counts), total, per, mant, exp, formula)


@dataclass
class TrajectorySummary:
    candidates: list[str]
    iterations: list[int]
    final_gate: dict[str, float]
    final_rank: dict[str, int]
    dominance_onset: dict[str, int | None]
    ranks: list[list[int]] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "final_gate": self.final_gate,
                "final_rank": self.final_rank, "dominance_onset": self.dominance_onset}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["connection", "final_gate", "final_rank", "dominance_onset"])
        for c in self.candidates:
            onset = self.dominance_onset[c]
            w.writerow([c, repr(self.final_gate[c]), self.final_rank[c],
                        "" if onset is None else onset])
        return buf.getvalue()


def _series(log, candidates: Sequence[str]) -> tuple[list[int], dict[str, list[float]]]:
    if isinstance(log, Mapping):
        series = {c: list(log[c]) for c in candidates if c in log}
        n = len(next(iter(series.values()))) if series else 0
        iterations = list(range(n))
    else:
        rows: dict[str, dict[int, float]] = {}
        for it, conn, g in log:
            rows.setdefault(str(conn), {})[int(it)] = float(g)
        series, iterations = {}, None
        for c in candidates:
            if c in rows:
                its = sorted(rows[c])
                iterations = its if iterations is None else iterations
                if its != iterations:
                    raise ValueError(f"candidate {c} is logged at different iterations")
                series[c] = [rows[c][i] for i in its]
        iterations = iterations or []
    missing = [c for c in candidates if c not in series]
    if missing:
        raise ValueError(f"missing series for candidates {missing}")
    return iterations, series


def summarize_trajectories(log, candidates: Sequence) -> TrajectorySummary:
    """Ranks of the candidates at every logged step (1 = largest gate).

    ``log`` is either rows ``(iteration, connection, gate)`` or a mapping
    ``connection -> gate series``. The dominance onset of a candidate is the
    first logged iteration from which it holds rank 1 until the end.
    """
    cands = [str(c) for c in candidates]
    iterations, series = _series(log, cands)
    if not iterations:
        raise ValueError("empty trajectory log")
    mat = np.array([series[c] for c in cands])  # (n_cands, T)
    ranks = []
    for t in range(mat.shape[1]):
        order = sorted(range(len(cands)), key=lambda i: (-mat[i, t], i))
        r = [0] * len(cands)
        for pos, i in enumerate(order):
            r[i] = pos + 1
        ranks.append(r)
    onset = {}
    for i, c in enumerate(cands):
        first = None
        for t in range(len(ranks) - 1, -1, -1):
            if ranks[t][i] != 1:
                break
            first = t
        onset[c] = None if first is None else iterations[first]
    return TrajectorySummary(
        candidates=cands,
        iterations=list(iterations),
        final_gate={c: float(mat[i, -1]) for i, c in enumerate(cands)},
        final_rank={c: ranks[-1][i] for i, c in enumerate(cands)},
        dominance_onset=onset,
        ranks=ranks,
    )


def depth_stats(archs: Iterable[DiscreteArchitecture]) -> tuple[float, float]:
    """Mean and population standard deviation of architecture depth."""
    ds = [depth(a) for a in archs]
    if not ds:
        raise ValueError("depth_stats of an empty set")
    return float(np.mean(ds)), float(np.std(ds))
