"""Command-line interface.

Every command that produces files writes them into one run directory under
``$IFNAS_RUN_ROOT`` (default ``./runs``), named after the command and a hash
of its inputs. Each run directory holds a single append-only
``manifest.jsonl``. Exit codes: 0 ok, 2 infeasible budget, 3 numerical
fault, 64 usage, 65 infeasible injection, 66 file error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from ifnas import __version__
from ifnas import config as cfgmod
from ifnas import io as archio
from ifnas.analysis import count_space, depth_stats
from ifnas.autodiff import NumericalFault
from ifnas.cost import madds, minimal_madds, param_count
from ifnas.experiments import Figure1Config, run_figure1
from ifnas.interleave import (InfeasibleInjection, SampleMask, extract_subsupernet,
                              find_interleaved_pairs, full_mask, inject_interleaves)
from ifnas.search import SearchNumericalFault, run_search, trajectory_csv
from ifnas.space import (Connection, InfeasibleBudget, SpecError, build_supernet, depth,
                         random_architecture)

EXIT_OK = 0
EXIT_BUDGET = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 64
EXIT_INJECTION = 65
EXIT_FILE = 66

log = logging.getLogger("ifnas")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# run directories


def run_root() -> Path:
    return Path(os.environ.get("IFNAS_RUN_ROOT", "runs"))


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def append_manifest(run_dir: Path, record: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "manifest.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_run_dir(args, command: str, inputs: dict) -> tuple[Path, str]:
    h = content_hash({"command": command, **inputs})
    d = Path(args.run_dir) if args.run_dir else run_root() / f"{command}-{h[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    return d, h


def emit(args, payload: dict, text: str):
    print(json.dumps(payload, indent=1, sort_keys=True) if args.json else text)


def _workers(args, n: int) -> int:
    return max(1, min(n, args.workers or os.cpu_count() or 1))


def _fan_out(fn, jobs: list, workers: int) -> list:
    if workers == 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def plot_trajectories(rows, path: Path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, tuple[list, list]] = {}
    for it, conn, g in rows:
        xs, ys = series.setdefault(conn, ([], []))
        xs.append(it)
        ys.append(g)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for conn, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, label=conn, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("gate")
    ax.set_title(title)
    if len(series) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# commands


def cmd_count(args) -> int:
    L, stages, formula = args.L, args.stages, args.formula
    if args.config:
        opts = cfgmod.options(cfgmod.read(args.config), "count")
        L = int(opts.get("L", L)) if L is None else L
        stages = stages or opts.get("stages")
        formula = formula or opts.get("formula")
    if L is None or not stages:
        raise UsageError("count needs --L and --stages (or a config with them)")
    rep = count_space(L, cfgmod.parse_ints(stages), n_ops=args.n_ops,
                      formula=formula or "literal")
    emit(args, rep.to_dict(), rep.sci)
    return EXIT_OK


def _search_job(config_text: str, base: str, seed: int, if_sampling, out_dir: str,
                checkpoint: bool, resume: str | None, plot: bool) -> dict:
    cp = cfgmod.parse(config_text)
    spec = cfgmod.spec_from(cp)
    conf = cfgmod.search_config_from(cp, spec)
    conf.seed = seed
    if if_sampling is not None:
        conf.if_sampling = if_sampling
    data = cfgmod.dataset_from(cp, Path(base))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        arch, report = run_search(spec, conf, data, resume=resume,
                                  checkpoint=out / "checkpoint.npz" if checkpoint else None)
    except SearchNumericalFault as e:
        atomic_write(out / "fault.json", json.dumps(
            {"error": str(e), "snapshot": e.snapshot}, indent=1, sort_keys=True, default=str) + "\n")
        raise
    atomic_write(out / "arch.json", archio.export_json(arch))
    atomic_write(out / "report.json", report.to_json())
    atomic_write(out / "trajectories.csv", report.trajectory_csv())
    files = ["arch.json", "report.json", "trajectories.csv"]
    if plot:
        plot_trajectories(report.trajectory, out / "trajectories.svg", f"seed {seed}")
        files.append("trajectories.svg")
    return {"seed": seed, "if_sampling": conf.if_sampling, "depth": report.depth,
            "madds": report.madds, "budget": conf.madds_budget, "param_count": report.param_count,
            "forced_prunes": report.forced_prunes, "files": files}


def _data_hash(cp, base: Path) -> str | None:
    opts = cfgmod.options(cp, "data")
    if opts.get("kind") != "npz" or "path" not in opts:
        return None
    p = Path(opts["path"])
    return hashlib.sha256((p if p.is_absolute() else base / p).read_bytes()).hexdigest()


def cmd_search(args) -> int:
    path = Path(args.config)
    config_text = path.read_text(encoding="utf-8")
    cp = cfgmod.read(path)
    spec = cfgmod.spec_from(cp)
    conf = cfgmod.search_config_from(cp, spec)
    if args.if_sampling is not None:
        conf.if_sampling = args.if_sampling == "on"
    conf.check(spec)
    seeds = [conf.seed + i for i in range(args.seeds)]
    inputs = {"config": config_text, "if_sampling": conf.if_sampling, "seeds": seeds,
              "resume": args.resume, "data": _data_hash(cp, path.parent)}
    run_dir, h = make_run_dir(args, "search", inputs)
    started = now()
    override = None if args.if_sampling is None else args.if_sampling == "on"
    jobs = [(config_text, str(path.parent), s, override, str(run_dir / f"seed-{s}"),
             args.checkpoint, args.resume, args.plot) for s in seeds]
    t0 = time.perf_counter()
    results = _fan_out(_search_job, jobs, _workers(args, len(jobs)))
    append_manifest(run_dir, {
        "command": "search", "version": __version__, "input_hash": h,
        "config": {"spec": spec.to_dict(), "search": conf.to_dict(),
                   "data": cfgmod.options(cp, "data")},
        "mode": "interleaving-free" if conf.if_sampling else "baseline",
        "seeds": seeds, "started": started, "finished": now(),
        "outputs": [f"seed-{r['seed']}/{f}" for r in results for f in r["files"]],
    })
    payload = {"run_dir": str(run_dir), "runs": results,
               "seconds": round(time.perf_counter() - t0, 3)}
    lines = [f"run dir: {run_dir}"]
    lines += [f"seed {r['seed']}: depth {r['depth']}, MAdds {r['madds']} (budget {r['budget']})"
              for r in results]
    emit(args, payload, "\n".join(lines))
    return EXIT_OK


def _figure1_job(cfg_dict: dict, k: int, seed: int, out_dir: str, plot: bool) -> dict:
    fc = Figure1Config(**cfg_dict)
    res = run_figure1(k, seed, fc)
    out = Path(out_dir)
    atomic_write(out / "trajectories.csv", trajectory_csv(res.rows))
    atomic_write(out / "summary.csv", res.summary.to_csv())
    atomic_write(out / "summary.json",
                 json.dumps(res.manifest_entry(), indent=1, sort_keys=True) + "\n")
    files = ["trajectories.csv", "summary.csv", "summary.json"]
    if plot:
        plot_trajectories(res.rows, out / "trajectories.svg", f"k={k} seed {seed}")
        files.append("trajectories.svg")
    return {**res.manifest_entry(), "files": files}


def cmd_figure1(args) -> int:
    fc = cfgmod.figure1_config_from(cfgmod.read(args.config)) if args.config else Figure1Config()
    # fail before training if the injection is impossible
    sn = build_supernet(fc.spec())
    cands = fc.candidates()
    inject_interleaves(SampleMask(frozenset(sn.backbone()) | frozenset(cands)), args.k, cands, sn)
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    run_dir, h = make_run_dir(args, "figure1", {"config": fc.to_dict(), "k": args.k,
                                                "seeds": seeds})
    started = now()
    jobs = [(fc.to_dict(), args.k, s, str(run_dir / f"seed-{s}"), args.plot) for s in seeds]
    results = _fan_out(_figure1_job, jobs, _workers(args, len(jobs)))
    pre1 = str(cands[0])
    wins = sum(r["final_rank"][pre1] == 1 for r in results)
    onsets = [r["dominance_onset"][pre1] for r in results]
    injected = results[0]["injected"] if results else []
    append_manifest(run_dir, {
        "command": "figure1", "version": __version__, "input_hash": h, "config": fc.to_dict(),
        "k": args.k, "seeds": seeds, "candidates": [str(c) for c in cands],
        "injected": injected,
        "injected_edges": [[c.source, c.target] for c in map(Connection.parse, injected)],
        "started": started, "finished": now(),
        "outputs": [f"seed-{r['seed']}/{f}" for r in results for f in r["files"]],
    })
    summary = {"k": args.k, "candidates": [str(c) for c in cands], "injected": injected,
               "pre1_rank1_seeds": wins, "pre1_onsets": onsets,
               "runs": [{k: v for k, v in r.items() if k != "files"} for r in results]}
    atomic_write(run_dir / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    lines = [f"run dir: {run_dir}", f"k={args.k} injected: {', '.join(injected) or 'none'}"]
    for r in results:
        ranks = " ".join(f"{c}:{r['final_rank'][c]}" for c in r["candidates"])
        lines.append(f"seed {r['seed']}: final ranks {ranks}")
    lines.append(f"pre-1 rank 1 in {wins} of {len(results)} seeds")
    emit(args, {"run_dir": str(run_dir), **summary}, "\n".join(lines))
    return EXIT_OK


def cmd_random(args) -> int:
    cp = cfgmod.read(args.config)
    spec = cfgmod.spec_from(cp)
    opts = cfgmod.options(cp, "random")
    budget = cfgmod.resolve_budget(args.budget if args.budget is not None
                                   else opts.get("budget"), spec)
    one_input = args.one_input or opts.get("one_input_per_node", "no").lower() in (
        "1", "true", "yes", "on")
    p = float(opts.get("p", 0.5))
    if budget is not None and budget < minimal_madds(spec):
        raise InfeasibleBudget(f"budget {budget} is below the minimal cost {minimal_madds(spec)}")
    seed0 = args.seed0 if args.seed0 is not None else int(opts.get("seed", 0))
    seeds = list(range(seed0, seed0 + args.seeds))
    run_dir, h = make_run_dir(args, "random", {"spec": spec.to_dict(), "budget": budget,
                                               "one_input": one_input, "p": p, "seeds": seeds})
    started = now()
    rows, archs = [], []
    for s in seeds:
        a = random_architecture(spec, s, budget, one_input_per_node=one_input, p=p)
        archs.append(a)
        atomic_write(run_dir / f"seed-{s}" / "arch.json", archio.export_json(a))
        rows.append({"seed": s, "depth": depth(a), "madds": madds(a), "param_count": param_count(a)})
    mean, std = depth_stats(archs)
    summary = {"budget": budget, "one_input_per_node": one_input, "runs": rows,
               "depth_mean": mean, "depth_std": std}
    atomic_write(run_dir / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    append_manifest(run_dir, {
        "command": "random", "version": __version__, "input_hash": h,
        "config": {"spec": spec.to_dict(), "budget": budget, "one_input_per_node": one_input,
                   "p": p},
        "seeds": seeds, "started": started, "finished": now(),
        "outputs": [f"seed-{s}/arch.json" for s in seeds] + ["summary.json"],
    })
    lines = [f"run dir: {run_dir}"]
    lines += [f"seed {r['seed']}: depth {r['depth']}, MAdds {r['madds']}" for r in rows]
    lines.append(f"depth {mean:.2f} +- {std:.2f}")
    emit(args, {"run_dir": str(run_dir), **summary}, "\n".join(lines))
    return EXIT_OK


def _load_json_file(path: str):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise archio.ParseError(f"{path}:{e.lineno}:{e.colno}", e.msg) from None


def cmd_audit(args) -> int:
    sets = archio.audit_sets(_load_json_file(args.path))
    report, lines = [], []
    for label, conns in sets:
        broad = find_interleaved_pairs(conns)
        narrow = find_interleaved_pairs(conns, exempt_same_target=False)
        report.append({"label": label, "connections": len(conns),
                       "pairs": [str(p) for p in broad], "count": len(broad),
                       "count_without_exemption": len(narrow),
                       "same_target_pairs": [str(p) for p in narrow if p not in broad]})
        lines.append(f"{label}: {len(broad)} interleaved pairs "
                     f"({len(narrow)} without the same-target exemption)")
        lines += [f"  {p}" for p in broad]
    emit(args, {"path": args.path, "sets": report}, "\n".join(lines))
    return EXIT_OK


def cmd_export(args) -> int:
    arch = archio.import_json(Path(args.path).read_text(encoding="utf-8"))
    text = archio.export_dot(arch, Path(args.path).stem) if args.format == "dot" \
        else archio.export_json(arch)
    if args.json and args.format == "dot":
        print(json.dumps({"format": "dot", "text": text}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_masks(args) -> int:
    spec = cfgmod.spec_from(cfgmod.read(args.config))
    sn = build_supernet(spec)
    masks = [full_mask(sn)] + [extract_subsupernet(sn, lam) for lam in range(1, spec.L + 1)]
    sys.stdout.write(archio.dump_masks(sn, masks))
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ifnas", description="Interleaving-free L-chain architecture search.")
    p.add_argument("--version", action="version", version=f"ifnas {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, run_dir=False, seeds=False):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if run_dir:
            sp.add_argument("--run-dir", help="explicit run directory")
            sp.add_argument("--plot", action="store_true", help="write SVG gate curves")
        if seeds:
            sp.add_argument("--seeds", type=int, default=1, help="number of seeds")
            sp.add_argument("--workers", type=int, default=None, help="worker processes")

    sp = sub.add_parser("count", help="size of the search space")
    sp.add_argument("--L", type=int)
    sp.add_argument("--stages", help="comma-separated node counts, e.g. 18,20,18")
    sp.add_argument("--formula", choices=("literal", "prose"))
    sp.add_argument("--n-ops", type=int, default=2)
    sp.add_argument("--config")
    common(sp)
    sp.set_defaults(fn=cmd_count)

    sp = sub.add_parser("search", help="run the architecture search")
    sp.add_argument("--config", required=True)
    sp.add_argument("--if-sampling", choices=("on", "off"))
    sp.add_argument("--checkpoint", action="store_true", help="save a checkpoint every loop")
    sp.add_argument("--resume", help="checkpoint to resume from")
    common(sp, run_dir=True, seeds=True)
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("figure1", help="candidate-interference experiment")
    sp.add_argument("--k", type=int, required=True, choices=(0, 1, 2, 3))
    sp.add_argument("--config")
    sp.add_argument("--seed0", type=int, default=0, help="first seed")
    common(sp, run_dir=True, seeds=True)
    sp.set_defaults(fn=cmd_figure1, seeds=5)

    sp = sub.add_parser("random", help="random baseline architectures")
    sp.add_argument("--config", required=True)
    sp.add_argument("--budget", help="MAdds budget, 'chain' or 'none'")
    sp.add_argument("--one-input", action="store_true")
    sp.add_argument("--seed0", type=int)
    common(sp, run_dir=True, seeds=True)
    sp.set_defaults(fn=cmd_random)

    sp = sub.add_parser("audit", help="list interleaved pairs of an architecture or mask dump")
    sp.add_argument("path")
    common(sp)
    sp.set_defaults(fn=cmd_audit)

    sp = sub.add_parser("export", help="convert an architecture file")
    sp.add_argument("path")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--dot", dest="format", action="store_const", const="dot")
    g.add_argument("--to-json", dest="format", action="store_const", const="json")
    common(sp)
    sp.set_defaults(fn=cmd_export, format="dot")

    sp = sub.add_parser("masks", help="dump the sampling masks of a spec as JSON")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_masks)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seeds", 1) < 1:
        print("--seeds must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleBudget as e:
        print(f"infeasible budget: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericalFault as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InfeasibleInjection as e:
        print(f"infeasible injection: {e}", file=sys.stderr)
        return EXIT_INJECTION
    except (OSError, archio.ParseError) as e:
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_FILE
    except (cfgmod.ConfigError, SpecError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
