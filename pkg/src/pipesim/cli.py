"""Command-line front end: ``pipesim schedule | run | verify``.

Exit codes: 0 success, 1 invariant or runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .core import ALL_POLICIES, ConfigError, Pass, Policy, PolicyKind, SimConfig, validate_config
from .engine import Thresholds, TrainRun, run_policy, summarize, summary_json, trainrun_csv
from .scheduler import ScheduleEvent, Timeline, build_timeline, render_gantt, timeline_csv, verify_timeline

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SWEEP_CELLS = [(S, M, m) for S in (2, 4) for M in (4, 8) for m in (1, 2)]
VERIFY_EPOCHS = 2  # δ and memory patterns repeat every epoch, so two epochs cover the boundary too

# flag name -> SimConfig field
CONFIG_FLAGS = {
    "stages": "stages",
    "mini_batches": "mini_batches",
    "micro_batches": "micro_batches",
    "fwd_cost": "fwd_cost",
    "bwd_cost": "bwd_cost",
    "seed": "seed",
    "epochs": "epochs",
    "lr": "lr",
    "hidden": "hidden",
    "dataset": "dataset",
    "samples": "samples",
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    base: SimConfig
    policies: tuple[PolicyKind, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    thresholds: Thresholds = field(default_factory=Thresholds)

    def __post_init__(self):
        if not self.policies:
            raise UsageError("at least one policy is required")
        if not self.seeds:
            raise UsageError("at least one seed is required")

    def cells(self) -> list[SimConfig]:
        return [replace(self.base.with_policy(p), seed=s) for p in self.policies for s in self.seeds]


# --- argument handling -------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="JSON file with SimConfig keys")
    g.add_argument("--stages", type=int)
    g.add_argument("--mini-batches", type=int)
    g.add_argument("--micro-batches", type=int)
    g.add_argument("--fwd-cost", type=int)
    g.add_argument("--bwd-cost", type=int)
    g.add_argument("--policy", help="one policy name")
    g.add_argument("--lambda", dest="lam", type=float, help="decay rate for ITiMePReSt")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--dataset", choices=("blobs", "spirals"))
    g.add_argument("--samples", type=int)
    g.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")

    p = argparse.ArgumentParser(prog="pipesim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sched = sub.add_parser("schedule", parents=[common], help="write timeline.csv and print a Gantt grid")
    sched.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    run = sub.add_parser("run", parents=[common], help="train every (policy, seed) cell")
    run.add_argument("--policies", help="comma-separated policy names (default: all four)")
    run.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: 0,1,2,3,4)")
    run.add_argument("--loss-threshold", type=float, default=Thresholds.loss)
    run.add_argument("--acc-threshold", type=float, default=Thresholds.accuracy)

    ver = sub.add_parser("verify", parents=[common], help="check schedule, staleness and memory invariants")
    ver.add_argument("--sweep", action="store_true", help="check every S∈{2,4}, M∈{4,8}, m∈{1,2} cell")
    ver.add_argument("--seeds", type=_int_list, help="seeds for the staleness census (default: --seed)")
    ver.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return p


def config_from_args(args: argparse.Namespace) -> SimConfig:
    try:
        cfg = SimConfig.load(args.config) if args.config else SimConfig()
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {args.config}: {err}") from None
    overrides = {fld: getattr(args, flag) for flag, fld in CONFIG_FLAGS.items() if getattr(args, flag) is not None}
    cfg = replace(cfg, **overrides)
    if args.policy is not None or args.lam is not None:
        kind = args.policy if args.policy is not None else cfg.policy.kind
        lam = args.lam if args.lam is not None else cfg.policy.lam
        cfg = replace(cfg, policy=Policy.of(kind, lam))
    return validate_config(cfg)


def _workers(cells: int) -> int:
    raw = os.environ.get("PIPESIM_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise UsageError(f"PIPESIM_THREADS must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise UsageError(f"PIPESIM_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(cap, cells))


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory {path}: {err}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def corrupt(t: Timeline) -> Timeline:
    """Move the first backward box at stage 0 to tick 0, ahead of its own forward."""
    events = list(t.events)
    i = next(i for i, e in enumerate(events) if e.stage == 0 and e.kind is Pass.BACKWARD)
    e = events[i]
    events[i] = ScheduleEvent(e.stage, 0, e.duration, e.kind, e.batch)
    return Timeline(tuple(events), t.epoch_span, t.idle_ticks_per_stage)


# --- subcommands -------------------------------------------------------------


def cmd_schedule(cfg: SimConfig, out: Path, inject_fault: bool = False) -> int:
    t = build_timeline(cfg)
    if inject_fault:
        t = corrupt(t)
    _ensure_dir(out)
    (out / "timeline.csv").write_text(timeline_csv(t))
    print(f"{cfg.policy.name}: S={cfg.stages} M={cfg.mini_batches} m={cfg.micro_batches} "
          f"epoch_span={t.epoch_span} idle={list(t.idle_ticks_per_stage)}")
    print(render_gantt(t, cfg.stages))
    problems = verify_timeline(t, cfg)
    for v in problems:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_INVARIANT if problems else EXIT_OK


def _run_cell(cfg: SimConfig) -> TrainRun:
    run = run_policy(cfg)
    run.history = None  # not needed by the collector; keeps IPC small
    return run


def execute(cells: Sequence[SimConfig]) -> list[TrainRun]:
    workers = _workers(len(cells))
    if workers == 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, cells))


def trainrun_filename(run: TrainRun) -> str:
    return f"trainrun_{run.policy}_seed{run.seed}.csv"


def cmd_run(spec: ExperimentSpec) -> int:
    _ensure_dir(spec.output_dir)
    runs = execute(spec.cells())
    # single collector: every file is written here, after all workers finish
    for run in runs:
        (spec.output_dir / trainrun_filename(run)).write_text(trainrun_csv(run))
    summary = summarize(runs, spec.thresholds)
    (spec.output_dir / "summary.json").write_text(summary_json(summary))
    for name, entry in summary["policies"].items():
        print(f"{name:<11} span={entry['epoch_span']:<4} epochs_to_loss={entry['epochs_to_loss_threshold']!s:<12} "
              f"final_loss={entry['final_loss_median']:.4f} peaks={entry['peak_live_versions_per_stage']}")
    print(f"wrote {len(runs)} trainrun CSVs and summary.json to {spec.output_dir}")
    return EXIT_OK


def check_schedules(cfg: SimConfig, inject_fault: bool = False) -> list[str]:
    fails = []
    spans = {}
    for kind in ALL_POLICIES:
        c = cfg.with_policy(kind)
        t = build_timeline(c)
        if inject_fault:
            t = corrupt(t)
        spans[kind] = t.epoch_span
        fails += [f"{kind.value}: {v}" for v in verify_timeline(t, c)]
    if cfg.micro_batches == 1 and spans[PolicyKind.TIMEPREST] != spans[PolicyKind.PIPEDREAM]:
        fails.append(f"m=1 nF1B span {spans[PolicyKind.TIMEPREST]} != 1F1B span {spans[PolicyKind.PIPEDREAM]}")
    return fails


def check_throughput(cfg: SimConfig) -> list[str]:
    spans = {k: build_timeline(cfg.with_policy(k)).epoch_span for k in ALL_POLICIES}
    nf1b = {spans[k] for k in ALL_POLICIES if k.uses_nf1b}
    fails = []
    if len(nf1b) != 1:
        fails.append(f"nF1B policies disagree on epoch_span: {spans}")
    if max(nf1b) > spans[PolicyKind.PIPEDREAM]:
        fails.append(f"nF1B span {max(nf1b)} > PipeDream span {spans[PolicyKind.PIPEDREAM]}")
    return fails


def check_staleness(runs: dict[PolicyKind, TrainRun], cfg: SimConfig) -> list[str]:
    fails = []
    v = runs[PolicyKind.VTIMEPREST]
    if any(r.delta for r in v.staleness):
        fails.append(f"VTiMePReSt recorded δ>0 (seed {v.seed})")
    if cfg.stages >= 2 and cfg.mini_batches >= 4:
        for kind in (PolicyKind.PIPEDREAM, PolicyKind.TIMEPREST):
            if not any(r.delta > 0 for r in runs[kind].staleness):
                fails.append(f"{kind.value} recorded no δ>0 (seed {runs[kind].seed})")
    return fails


def check_memory(runs: dict[PolicyKind, TrainRun]) -> list[str]:
    order = (PolicyKind.VTIMEPREST, PolicyKind.TIMEPREST, PolicyKind.ITIMEPREST, PolicyKind.PIPEDREAM)
    peaks = [runs[k].peak_live_counts for k in order]
    fails = []
    if any(p != 1 for p in peaks[0]):
        fails.append(f"VTiMePReSt peaks {peaks[0]} are not all 1")
    for s in range(len(peaks[0])):
        column = [p[s] for p in peaks]
        if column != sorted(column):
            fails.append(f"stage {s}: V/T/I/PipeDream peaks {column} not ordered")
    return fails


def check_commits(runs: dict[PolicyKind, TrainRun], cfg: SimConfig) -> list[str]:
    return [f"{k.value}: commits per stage {r.commits_per_stage}" for k, r in runs.items()
            if any(c != cfg.mini_batches for epoch in r.commits_per_stage for c in epoch)]


FAMILIES = ("schedule", "throughput", "staleness", "memory", "commits")


def verify_report(cfg: SimConfig, sweep: bool, seeds: Sequence[int],
                  inject_fault: bool = False) -> dict[str, list[str]]:
    shapes = SWEEP_CELLS if sweep else [(cfg.stages, cfg.mini_batches, cfg.micro_batches)]
    report: dict[str, list[str]] = {f: [] for f in FAMILIES}
    cells = []
    for S, M, m in shapes:
        c = replace(cfg, stages=S, mini_batches=M, micro_batches=m, epochs=min(cfg.epochs, VERIFY_EPOCHS))
        tag = f"S={S} M={M} m={m}"
        report["schedule"] += [f"{tag}: {f}" for f in check_schedules(c, inject_fault)]
        report["throughput"] += [f"{tag}: {f}" for f in check_throughput(c)]
        for seed in seeds:
            cells += [(tag, replace(c.with_policy(k), seed=seed)) for k in ALL_POLICIES]
    runs = execute([c for _, c in cells])
    grouped: dict[tuple[str, int], dict[PolicyKind, TrainRun]] = {}
    for (tag, c), run in zip(cells, runs):
        grouped.setdefault((tag, c.seed), {})[c.policy.kind] = run
    for (tag, seed), by_kind in grouped.items():
        c = next(c for t, c in cells if t == tag)
        report["staleness"] += [f"{tag}: {f}" for f in check_staleness(by_kind, c)]
        report["commits"] += [f"{tag}: {f}" for f in check_commits(by_kind, c)]
        if seed == seeds[0]:  # peaks depend only on the timeline
            report["memory"] += [f"{tag}: {f}" for f in check_memory(by_kind)]
    return report


def cmd_verify(cfg: SimConfig, sweep: bool, seeds: Sequence[int], inject_fault: bool = False) -> int:
    report = verify_report(cfg, sweep, seeds, inject_fault)
    for family, fails in report.items():
        print(f"{'PASS' if not fails else 'FAIL'} {family}")
        for f in fails:
            print(f"    {f}")
    return EXIT_OK if not any(report.values()) else EXIT_INVARIANT


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "schedule":
            return cmd_schedule(cfg, args.out, args.inject_fault)
        if args.command == "run":
            names = args.policies.split(",") if args.policies else (
                [cfg.policy.name] if args.policy else [k.value for k in ALL_POLICIES])
            spec = ExperimentSpec(cfg, tuple(PolicyKind.parse(n.strip()) for n in names),
                                  tuple(args.seeds if args.seeds is not None else DEFAULT_SEEDS),
                                  args.out, Thresholds(args.loss_threshold, args.acc_threshold))
            return cmd_run(spec)
        seeds = args.seeds if args.seeds else [cfg.seed]
        return cmd_verify(cfg, args.sweep, seeds, args.inject_fault)
    except (ConfigError, UsageError) as err:
        print(f"pipesim: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # module errors surface as a diagnostic, not a traceback
        print(f"pipesim: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
