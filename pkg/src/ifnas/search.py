"""One-level differentiable search with interleaving-free sampling and budgeted pruning.

The run is: a global warm-up that trains only the weights, then repeated
loops. With IF sampling a loop is ``[warm-up, G1, ..., GL]`` where the
warm-up step trains the weights of the whole supernet and each ``G`` step
trains one interleaving-free sub-supernet. Without IF sampling a loop is a
single phase of the same length over the full supernet.

Edge gates start updating right after the global warm-up, operator gates
``alpha_delay`` epochs later. From then on a discretising regulariser pushes
gates towards 0 or 1, and gates below the threshold are pruned permanently
until the architecture fits the multiply-add budget.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ifnas import autodiff as ad
from ifnas.autodiff import NumericalFault, Tensor
from ifnas.cost import madds, minimal_madds, param_count
from ifnas.data import Dataset
from ifnas.interleave import (FULL, GROUP, WARMUP, Phase, SampleMask, find_interleaved_pairs,
                              full_mask, make_schedule, mask_for_phase)
from ifnas.network import ParamStore, forward_mixed, gate
from ifnas.space import (Connection, DiscreteArchitecture, InfeasibleBudget, OperatorKind,
                         Supernet, SupernetSpec, build_supernet, cleanup, depth,
                         output_reachable, sorted_pairs)

log = logging.getLogger(__name__)

STATE_VERSION = 1
MIXING_RULE = "sum over edges of sigmoid(beta) * sum over ops of sigmoid(alpha) * op(x)"

__all__ = [
    "SearchConfig", "SearchState", "UpdateFlags", "RunReport", "SearchNumericalFault",
    "regularizer", "run_phase", "prune_step", "run_search", "madds",
]


class SearchNumericalFault(NumericalFault):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SearchConfig:
    warmup_epochs: int = 20
    alpha_delay: int = 10
    iterations_per_step: int = 100
    iterations_per_epoch: int | None = None
    mu1: float = 0.0
    mu2: float = 0.0
    mu_seed: float = 0.01
    mu_growth: float = 2.0
    prune_threshold: float = 0.01
    madds_budget: int | None = None
    lr_weights: float = 0.05
    lr_arch: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-5
    seed: int = 0
    if_sampling: bool = True
    derive: str = "budget"
    max_loops: int = 50
    log_every: int = 1
    beta_init: float = 0.0
    alpha_init: float = 0.0
    weight_scale: float = 1.0

    def check(self, spec: SupernetSpec | None = None):
        if not 0.0 < self.prune_threshold < 1.0:
            raise ValueError(f"prune_threshold must lie in (0, 1), got {self.prune_threshold}")
        if self.derive not in ("budget", "one_input"):
            raise ValueError(f"derive must be 'budget' or 'one_input', got {self.derive!r}")
        for name in ("iterations_per_step", "max_loops", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("warmup_epochs", "alpha_delay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mu_growth <= 1.0:
            raise ValueError("mu_growth must exceed 1")
        if spec is not None and self.madds_budget is not None:
            floor = minimal_madds(spec)
            if self.madds_budget < floor:
                raise InfeasibleBudget(
                    f"madds_budget {self.madds_budget} is below the minimal chain cost {floor}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown search options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class UpdateFlags:
    omega: bool = True
    beta: bool = False
    alpha: bool = False
    arch_subset: frozenset | None = None  # restrict arch updates to these connections


WARMUP_FLAGS = UpdateFlags(omega=True)


class MomentumSGD:
    def __init__(self, names: dict[int, str]):
        self.names = names
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, leaves, lr: float, momentum: float, weight_decay: float = 0.0):
        for t in leaves:
            if t.grad is None:
                continue
            g = t.grad
            if weight_decay:
                g = g + weight_decay * t.data
            name = self.names[id(t)]
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            self.buffers[name] = buf
            t.data = t.data - lr * buf
            t.bump_version()


@dataclass
class SearchState:
    supernet: Supernet
    config: SearchConfig
    params: ParamStore
    pruned_edges: set = field(default_factory=set)
    pruned_ops: set = field(default_factory=set)
    mu1: float = 0.0
    mu2: float = 0.0
    iteration: int = 0
    arch_iterations: int = 0
    loop: int = 0
    warmed_up: bool = False
    discretizing: bool = False
    track: list | None = None
    trajectory: list = field(default_factory=list)
    timeline: list = field(default_factory=list)
    mu_history: list = field(default_factory=list)
    phases_audited: int = 0
    audit_violations: int = 0
    forced_prunes: int = 0
    optimizer: MomentumSGD | None = None

    def __post_init__(self):
        if self.optimizer is None:
            names = {id(t): k for k, t in self.params.named_leaves().items()}
            self.optimizer = MomentumSGD(names)

    @classmethod
    def fresh(cls, supernet: Supernet, config: SearchConfig) -> "SearchState":
        rng = np.random.default_rng([config.seed, 1])
        params = ParamStore.init(supernet, rng, config.beta_init, config.alpha_init,
                                 config.weight_scale)
        return cls(supernet, config, params, mu1=config.mu1, mu2=config.mu2)

    @property
    def spec(self) -> SupernetSpec:
        return self.supernet.spec

    def alive_pairs(self) -> frozenset:
        pairs = {(c, o) for c in self.supernet.connections if c not in self.pruned_edges
                 for o in self.spec.operator_set if (c, o) not in self.pruned_ops}
        return cleanup(self.spec, pairs, drop_unused=True)

    def architecture(self) -> DiscreteArchitecture:
        return DiscreteArchitecture(self.spec, self.alive_pairs())

    def current_madds(self) -> int:
        return madds(self.architecture())

    def edge_gate(self, c: Connection) -> float:
        return float(gate(self.params.beta[c].data))

    def op_gate(self, c: Connection, o: OperatorKind) -> float:
        return float(gate(self.params.alpha[(c, o)].data))

    # checkpointing

    def save(self, path: str | Path):
        path = Path(path)
        arrays = {f"p/{k}": t.data for k, t in self.params.named_leaves().items()}
        arrays.update({f"m/{k}": v for k, v in self.optimizer.buffers.items()})
        meta = {
            "version": STATE_VERSION,
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "pruned_edges": [str(c) for c in sorted(self.pruned_edges)],
            "pruned_ops": [[str(c), o.value] for c, o in sorted_pairs(self.pruned_ops)],
            "mu1": self.mu1, "mu2": self.mu2,
            "iteration": self.iteration, "arch_iterations": self.arch_iterations,
            "loop": self.loop, "warmed_up": self.warmed_up, "discretizing": self.discretizing,
            "track": None if self.track is None else [str(c) for c in self.track],
            "trajectory": self.trajectory, "timeline": self.timeline,
            "mu_history": self.mu_history, "phases_audited": self.phases_audited,
            "audit_violations": self.audit_violations, "forced_prunes": self.forced_prunes,
        }
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "SearchState":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta["version"] != STATE_VERSION:
                raise ValueError(f"unsupported state version {meta['version']}")
            spec = SupernetSpec.from_dict(meta["spec"])
            config = SearchConfig.from_dict(meta["config"])
            state = cls.fresh(build_supernet(spec), config)
            state.params.load_arrays({k[2:]: z[k] for k in z.files if k.startswith("p/")})
            state.optimizer.buffers = {k[2:]: np.array(z[k]) for k in z.files if k.startswith("m/")}
        state.pruned_edges = {Connection.parse(s) for s in meta["pruned_edges"]}
        state.pruned_ops = {(Connection.parse(c), OperatorKind(o)) for c, o in meta["pruned_ops"]}
        for k in ("mu1", "mu2", "iteration", "arch_iterations", "loop", "warmed_up",
                  "discretizing", "mu_history", "phases_audited", "audit_violations",
                  "forced_prunes"):
            setattr(state, k, meta[k])
        state.track = None if meta["track"] is None else [Connection.parse(s) for s in meta["track"]]
        state.trajectory = [tuple(r) for r in meta["trajectory"]]
        state.timeline = meta["timeline"]
        return state


def _log_ratio_sum(gates: list[Tensor]) -> Tensor:
    v = ad.stack(gates)
    return ad.sum_all(ad.log1p(ad.div_scalar(v, ad.mean_all(v))))


def regularizer(params: ParamStore, pruned_edges=frozenset(), pruned_ops=frozenset(),
                mu1: float = 1.0, mu2: float = 1.0) -> Tensor:
    """Discretisation penalty on sigmoid gates, relative to their current means.

    ``mu1 * sum_e ln(1 + g(beta_e) / mean g(beta))`` over unpruned edges plus
    ``mu2 * sum ln(1 + g(alpha) / mean g(alpha))`` over unpruned operators on
    unpruned edges.
    """
    edges = [c for c in sorted(params.beta) if c not in pruned_edges]
    if not edges:
        raise ValueError("regularizer needs at least one unpruned edge")
    terms = []
    if mu1:
        terms.append(ad.mul_const(_log_ratio_sum([ad.sigmoid(params.beta[c]) for c in edges]), mu1))
    if mu2:
        ops = [params.alpha[(c, o)] for c in edges for o in params.spec.operator_set
               if (c, o) not in pruned_ops]
        if ops:
            terms.append(ad.mul_const(_log_ratio_sum([ad.sigmoid(a) for a in ops]), mu2))
    if not terms:
        return Tensor(0.0)
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def _set_trainable(state: SearchState, active, flags: UpdateFlags):
    ps = state.params
    for t in ps.weight_leaves():
        t.requires_grad = flags.omega
    subset = flags.arch_subset
    for c, t in ps.beta.items():
        t.requires_grad = (flags.beta and c in active and c not in state.pruned_edges
                           and (subset is None or c in subset))
    for (c, o), t in ps.alpha.items():
        t.requires_grad = (flags.alpha and c in active and c not in state.pruned_edges
                           and (c, o) not in state.pruned_ops and (subset is None or c in subset))


def _snapshot(state: SearchState, mask, extra=None) -> dict:
    gates = [state.edge_gate(c) for c in state.supernet.connections]
    snap = {
        "iteration": state.iteration,
        "phase": getattr(mask, "label", "custom"),
        "loop": state.loop,
        "mu": [state.mu1, state.mu2],
        "edge_gate_min": min(gates), "edge_gate_max": max(gates),
        "max_abs_weight": max(float(np.max(np.abs(t.data))) for t in state.params.weight_leaves()),
    }
    if extra:
        snap.update(extra)
    return snap


def run_phase(state: SearchState, mask, iterations: int, flags: UpdateFlags,
              data: Dataset) -> SearchState:
    """Run ``iterations`` masked SGD steps, logging tracked gates after each step."""
    cfg = state.config
    ps = state.params
    active = getattr(mask, "active", mask)
    if getattr(mask, "kind", None) == GROUP:
        live = {c for c in active if c not in state.pruned_edges}
        state.phases_audited += 1
        n_bad = len(find_interleaved_pairs(live))
        state.audit_violations += n_bad
        if n_bad:
            log.error("interleaved pairs in %s at iteration %d", mask.label, state.iteration)
    use_reg = (flags.beta or flags.alpha) and (state.mu1 or state.mu2)
    penalty = None
    if use_reg:
        def penalty():
            return regularizer(ps, state.pruned_edges, state.pruned_ops, state.mu1, state.mu2)
    track = state.supernet.connections if state.track is None else state.track
    for _ in range(iterations):
        _set_trainable(state, active, flags)
        batch = data.batch(cfg.seed, state.iteration)
        try:
            res = forward_mixed(state.supernet, active, ps, batch, state.pruned_edges,
                                state.pruned_ops, penalty)
            ps.zero_grad()
            res.loss.backward()
        except NumericalFault as exc:
            raise SearchNumericalFault(f"numerical fault at iteration {state.iteration}: {exc}",
                                       _snapshot(state, mask)) from exc
        weights = [t for t in ps.weight_leaves() if t.requires_grad]
        arch = [t for t in ps.arch_leaves() if t.requires_grad]
        state.optimizer.step(weights, cfg.lr_weights, cfg.momentum, cfg.weight_decay)
        state.optimizer.step(arch, cfg.lr_arch, cfg.momentum)
        for t in weights + arch:
            if not np.all(np.isfinite(t.data)):
                raise SearchNumericalFault(f"non-finite parameter after iteration {state.iteration}",
                                           _snapshot(state, mask, {"param": t.name}))
        if state.iteration % cfg.log_every == 0:
            for c in track:
                state.trajectory.append((state.iteration, str(c), state.edge_gate(c)))
        state.iteration += 1
    ps.zero_grad()
    return state


@dataclass
class PruneResult:
    events: list
    raise_mu: bool


def _outputs_reachable(spec: SupernetSpec, pairs) -> bool:
    conns = {c for c, _ in pairs}
    return all(output_reachable(conns, spec, s) for s in range(len(spec.stages)))


def _record(state: SearchState, kind: str, c: Connection, o, g: float, forced=False):
    state.timeline.append({
        "iteration": state.iteration, "loop": state.loop, "kind": kind,
        "connection": str(c), "op": None if o is None else o.value, "gate": g,
        "forced": forced, "madds_after": state.current_madds(),
    })


def _absorb_cleanup(state: SearchState):
    """Make dead-node removals permanent by moving them into the pruned sets."""
    spec = state.spec
    before = {(c, o) for c in state.supernet.connections if c not in state.pruned_edges
              for o in spec.operator_set if (c, o) not in state.pruned_ops}
    after = state.alive_pairs()
    state.pruned_ops |= before - after
    alive_conns = {c for c, _ in after}
    state.pruned_edges |= {c for c in state.supernet.connections if c not in alive_conns}


def prune_step(state: SearchState, threshold: float | None = None) -> PruneResult:
    """Permanently prune every edge and operator whose gate is below ``threshold``.

    Candidates are visited weakest first (ties in canonical connection order);
    a candidate whose removal would disconnect a stage output is kept.
    """
    thr = state.config.prune_threshold if threshold is None else threshold
    spec = state.spec
    events = []
    alive = set(state.alive_pairs())
    edges = sorted({c for c, _ in alive}, key=lambda c: (state.edge_gate(c), c.key))
    for c in edges:
        g = state.edge_gate(c)
        if g >= thr:
            break
        trial = cleanup(spec, {p for p in alive if p[0] != c}, drop_unused=True)
        if not _outputs_reachable(spec, trial):
            continue
        state.pruned_edges.add(c)
        alive = set(trial)
        _absorb_cleanup(state)
        _record(state, "edge", c, None, g)
        events.append((c, None))
    ops = sorted(alive, key=lambda p: (state.op_gate(*p), p[0].key, p[1].value))
    for c, o in ops:
        if (c, o) not in alive:
            continue
        g = state.op_gate(c, o)
        if g >= thr:
            break
        trial = cleanup(spec, alive - {(c, o)}, drop_unused=True)
        if not _outputs_reachable(spec, trial):
            continue
        state.pruned_ops.add((c, o))
        alive = set(trial)
        _absorb_cleanup(state)
        _record(state, "op", c, o, g)
        events.append((c, o))
    budget = state.config.madds_budget
    unmet = budget is not None and state.current_madds() > budget
    return PruneResult(events, raise_mu=not events and unmet)


def force_prune_to_budget(state: SearchState, budget: int):
    """Fallback when the loop cap is hit: drop the weakest pairs until the budget fits."""
    spec = state.spec
    while state.current_madds() > budget:
        alive = set(state.alive_pairs())
        order = sorted(alive, key=lambda p: (state.edge_gate(p[0]) * state.op_gate(*p),
                                             p[0].key, p[1].value))
        for c, o in order:
            trial = cleanup(spec, alive - {(c, o)}, drop_unused=True)
            if _outputs_reachable(spec, trial) and madds(DiscreteArchitecture(spec, trial)) < \
                    madds(DiscreteArchitecture(spec, alive)):
                state.pruned_ops.add((c, o))
                _absorb_cleanup(state)
                state.forced_prunes += 1
                _record(state, "op", c, o, state.edge_gate(c) * state.op_gate(c, o), forced=True)
                break
        else:
            raise InfeasibleBudget(f"cannot reach budget {budget} without disconnecting a stage")


def derive_one_input(state: SearchState) -> DiscreteArchitecture:
    """Keep only the strongest incoming edge of every surviving node."""
    alive = state.alive_pairs()
    by_target: dict = {}
    for c, _ in alive:
        by_target.setdefault((c.stage, c.target), set()).add(c)
    keep = {max(cs, key=lambda c: (state.edge_gate(c), -c.length())) for cs in by_target.values()}
    pairs = cleanup(state.spec, {p for p in alive if p[0] in keep})
    return DiscreteArchitecture(state.spec, pairs)


@dataclass
class RunReport:
    spec: dict
    config: dict
    depth: int
    madds: int
    param_count: int
    iterations: int
    loops: int
    budget_met: bool
    mu_history: list
    pruning_timeline: list
    forced_prunes: int
    if_audit: dict
    final_edge_gates: dict
    mixing_rule: str = MIXING_RULE
    trajectory: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("trajectory")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def trajectory_csv(self) -> str:
        return trajectory_csv(self.trajectory)


def trajectory_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "connection", "gate"])
    for it, conn, g in rows:
        w.writerow([it, conn, repr(float(g))])
    return buf.getvalue()


def _loop_phases(state: SearchState) -> list[Phase]:
    cfg, L = state.config, state.spec.L
    if cfg.if_sampling:
        return list(make_schedule(L, cfg.iterations_per_step, 1).phases)
    return [Phase(FULL, None, (L + 1) * cfg.iterations_per_step)]


def _grow_mu(state: SearchState):
    cfg = state.config
    state.mu1 = cfg.mu_seed if state.mu1 == 0 else state.mu1 * cfg.mu_growth
    state.mu2 = cfg.mu_seed if state.mu2 == 0 else state.mu2 * cfg.mu_growth
    state.mu_history.append({"iteration": state.iteration, "mu1": state.mu1, "mu2": state.mu2})


def run_search(spec: SupernetSpec, config: SearchConfig, dataset: Dataset,
               resume: str | Path | None = None, checkpoint: str | Path | None = None,
               track=None) -> tuple[DiscreteArchitecture, RunReport]:
    config.check(spec)
    if dataset.num_classes > spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, spec {spec.num_classes}")
    supernet = build_supernet(spec)
    if resume is not None:
        state = SearchState.load(resume)
    else:
        state = SearchState.fresh(supernet, config)
        state.track = None if track is None else list(track)
    supernet = state.supernet
    ipe = config.iterations_per_epoch or dataset.iterations_per_epoch
    alpha_start = config.alpha_delay * ipe
    budget = config.madds_budget

    def done() -> bool:
        return budget is not None and state.current_madds() <= budget

    if not state.warmed_up:
        run_phase(state, full_mask(supernet, WARMUP), config.warmup_epochs * ipe,
                  WARMUP_FLAGS, dataset)
        state.warmed_up = True
        if checkpoint:
            state.save(checkpoint)
    finished = state.discretizing and done()
    while state.loop < config.max_loops and not finished:
        pruned_in_loop = False
        for phase in _loop_phases(state):
            mask = mask_for_phase(supernet, phase)
            if phase.kind == WARMUP:
                run_phase(state, mask, phase.iterations, WARMUP_FLAGS, dataset)
                continue
            flags = UpdateFlags(omega=True, beta=True, alpha=state.arch_iterations >= alpha_start)
            state.discretizing = state.discretizing or flags.alpha
            run_phase(state, mask, phase.iterations, flags, dataset)
            state.arch_iterations += phase.iterations
            if state.discretizing:
                res = prune_step(state)
                pruned_in_loop = pruned_in_loop or bool(res.events)
                if done():
                    finished = True
                    break
        if state.discretizing and not pruned_in_loop and not finished:
            _grow_mu(state)
        state.loop += 1
        if checkpoint:
            state.save(checkpoint)
    if budget is not None and not done():
        log.warning("loop cap reached with %d MAdds > %d; forcing pruning",
                    state.current_madds(), budget)
        force_prune_to_budget(state, budget)
    arch = derive_one_input(state) if config.derive == "one_input" else state.architecture()
    report = RunReport(
        spec=spec.to_dict(),
        config=config.to_dict(),
        depth=depth(arch),
        madds=madds(arch),
        param_count=param_count(arch),
        iterations=state.iteration,
        loops=state.loop,
        budget_met=budget is None or madds(arch) <= budget,
        mu_history=state.mu_history,
        pruning_timeline=state.timeline,
        forced_prunes=state.forced_prunes,
        if_audit={"group_phases_checked": state.phases_audited,
                  "interleaved_pairs_found": state.audit_violations},
        final_edge_gates={str(c): state.edge_gate(c) for c in supernet.connections},
        trajectory=state.trajectory,
    )
    return arch, report
