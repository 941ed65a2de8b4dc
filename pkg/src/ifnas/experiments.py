"""Candidate-interference experiment.

One intermediate layer of a single-stage supernet chooses among its pre-1,
pre-3 and pre-6 inputs. Every other architectural parameter is frozen; only
the candidates' edge gates and the network weights train. Optionally ``k``
connections that interleave with the candidates are switched on as well, and
the candidates' gate curves show how much that confuses the choice.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ifnas.analysis import TrajectorySummary, summarize_trajectories
from ifnas.data import Dataset, make_synthetic
from ifnas.interleave import SampleMask, find_interleaved_pairs, inject_interleaves
from ifnas.search import SearchConfig, SearchState, UpdateFlags, WARMUP_FLAGS, run_phase
from ifnas.space import Connection, OperatorKind, SupernetSpec, StageSpec, build_supernet


@dataclass
class Figure1Config:
    L: int = 6
    nodes: int = 10
    layer: int = 8
    offsets: tuple = (1, 3, 6)
    channels: int = 8
    operators: tuple = ("ToyLinear", "Skip")
    warmup_iterations: int = 200
    train_iterations: int = 400
    frozen_beta: float = 4.0
    frozen_alpha: float = 0.94
    lr_weights: float = 0.05
    lr_arch: float = 1.0
    momentum: float = 0.9
    n_samples: int = 512
    num_classes: int = 4
    teacher_depth: int = 6
    batch_size: int = 32
    data_seed: int = 0

    def spec(self) -> SupernetSpec:
        return SupernetSpec(
            L=self.L,
            stages=(StageSpec(self.nodes, self.channels, 1, False),),
            operator_set=tuple(OperatorKind(o) for o in self.operators),
            in_channels=self.channels,
            num_classes=self.num_classes,
        )

    def dataset(self) -> Dataset:
        return make_synthetic(self.n_samples, self.num_classes, self.channels, 1,
                              self.teacher_depth, seed=self.data_seed,
                              batch_size=self.batch_size)

    def candidates(self) -> list[Connection]:
        return [Connection(0, self.layer - d, self.layer) for d in self.offsets]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Figure1Result:
    k: int
    seed: int
    candidates: list[str]
    injected: list[str]
    rows: list
    summary: TrajectorySummary

    def manifest_entry(self) -> dict:
        return {"k": self.k, "seed": self.seed, "candidates": self.candidates,
                "injected": self.injected, **self.summary.to_dict()}


def run_figure1(k: int, seed: int, cfg: Figure1Config | None = None,
                dataset: Dataset | None = None) -> Figure1Result:
    cfg = cfg or Figure1Config()
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be 0..3, got {k}")
    spec = cfg.spec()
    supernet = build_supernet(spec)
    cands = cfg.candidates()
    missing = [c for c in cands if c not in supernet.connection_set]
    if missing:
        raise ValueError(f"candidates {[str(c) for c in missing]} are not in the supernet")
    data = dataset or cfg.dataset()
    base = SampleMask(frozenset(supernet.backbone()) | frozenset(cands))
    mask = inject_interleaves(base, k, cands, supernet)
    injected = sorted(mask.active - base.active)

    search_cfg = SearchConfig(seed=seed, lr_weights=cfg.lr_weights, lr_arch=cfg.lr_arch,
                              momentum=cfg.momentum, weight_decay=0.0)
    state = SearchState.fresh(supernet, search_cfg)
    for c, t in state.params.beta.items():
        if c not in cands:
            t.data = np.float64(cfg.frozen_beta)
    for t in state.params.alpha.values():
        t.data = np.float64(cfg.frozen_alpha)
    state.track = cands
    run_phase(state, mask, cfg.warmup_iterations, WARMUP_FLAGS, data)
    flags = UpdateFlags(omega=True, beta=True, alpha=False, arch_subset=frozenset(cands))
    run_phase(state, mask, cfg.train_iterations, flags, data)
    rows = state.trajectory
    return Figure1Result(
        k=k, seed=seed,
        candidates=[str(c) for c in cands],
        injected=[str(c) for c in injected],
        rows=rows,
        summary=summarize_trajectories(rows, cands),
    )


def interference_pairs(result: Figure1Result) -> int:
    """Number of (injected, candidate) pairs that interleave."""
    inj = [Connection.parse(s) for s in result.injected]
    cands = [Connection.parse(s) for s in result.candidates]
    return len(find_interleaved_pairs(inj + cands)) - len(find_interleaved_pairs(inj))
