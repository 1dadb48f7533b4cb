"""Per-epoch event timelines for 1F1B (PipeDream) and nF1B (TiMePReSt family).

Both builders share one earliest-start list scheduler over the task DAG:

* F(b, k, s) waits for F(b, k, s-1);
* B(b, S-1) waits for every forward of b at the last stage;
* B(b, s) waits for B(b, s+1).

A stage runs one box at a time. When several tasks are ready on an idle
stage, backwards win over forwards, then lower (mini, micro) ids win. Stage
``s`` admits at most ``S - s`` mini-batches whose backward there has not
finished, which yields the usual 1F1B warm-up / steady-state / drain shape.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Optional

from .core import BatchRef, Pass, PolicyKind, SimConfig, validate_config


@dataclass(frozen=True)
class ScheduleEvent:
    stage: int
    start_tick: int
    end_tick: int
    kind: Pass
    batch: BatchRef

    @property
    def duration(self) -> int:
        return self.end_tick - self.start_tick


@dataclass(frozen=True)
class Timeline:
    events: tuple[ScheduleEvent, ...]
    epoch_span: int
    idle_ticks_per_stage: tuple[int, ...]

    @classmethod
    def from_events(cls, events: Iterable[ScheduleEvent], stages: int) -> "Timeline":
        events = tuple(sorted(events, key=_event_order))
        span = max((e.end_tick for e in events), default=0)
        busy = [0] * stages
        for e in events:
            busy[e.stage] += e.duration
        return cls(events, span, tuple(span - b for b in busy))

    def on_stage(self, stage: int) -> list[ScheduleEvent]:
        return [e for e in self.events if e.stage == stage]

    def count(self, kind: Pass) -> int:
        return sum(1 for e in self.events if e.kind is kind)


def _event_order(e: ScheduleEvent):
    micro = -1 if e.batch.micro_batch is None else e.batch.micro_batch
    return (e.start_tick, e.stage, e.kind.value, e.batch.mini_batch, micro)


def forward_duration(cfg: SimConfig, batch: BatchRef) -> int:
    # a whole-mini-batch forward carries all m micro-batches' worth of data
    if batch.micro_batch is None:
        return cfg.fwd_cost * cfg.micro_batches
    return cfg.fwd_cost


def _list_schedule(cfg: SimConfig, micro_ids: list[Optional[int]]) -> Timeline:
    S, M = cfg.stages, cfg.mini_batches
    minis = range(1, M + 1)
    fwd = {s: [BatchRef(b, k) for b in minis for k in micro_ids] for s in range(S)}
    fwd_end: dict[tuple[int, int, Optional[int]], int] = {}
    bwd_end: dict[tuple[int, int], int] = {}
    next_fwd = [0] * S
    next_bwd = [1] * S
    admitted: list[dict[int, Optional[int]]] = [{} for _ in range(S)]  # mini -> backward end tick
    stage_free = [0] * S
    events: list[ScheduleEvent] = []
    total = S * M * (len(micro_ids) + 1)

    def fwd_ready(s: int, ref: BatchRef, t: int) -> bool:
        if s > 0:
            end = fwd_end.get((s - 1, ref.mini_batch, ref.micro_batch))
            if end is None or end > t:
                return False
        if ref.mini_batch in admitted[s]:
            return True
        live = sum(1 for end in admitted[s].values() if end is None or end > t)
        return live < S - s

    def bwd_ready(s: int, b: int, t: int) -> bool:
        if s == S - 1:
            ends = [fwd_end.get((s, b, k)) for k in micro_ids]
            return all(e is not None and e <= t for e in ends)
        end = bwd_end.get((s + 1, b))
        return end is not None and end <= t

    t = 0
    while len(events) < total:
        for s in range(S):
            if stage_free[s] > t:
                continue
            # backwards at a stage complete in mini-batch order, so only the next one can be ready
            if next_bwd[s] <= M and bwd_ready(s, next_bwd[s], t):
                b = next_bwd[s]
                end = t + cfg.bwd_cost
                events.append(ScheduleEvent(s, t, end, Pass.BACKWARD, BatchRef(b)))
                bwd_end[(s, b)] = end
                admitted[s][b] = end
                next_bwd[s] += 1
                stage_free[s] = end
            elif next_fwd[s] < len(fwd[s]) and fwd_ready(s, fwd[s][next_fwd[s]], t):
                ref = fwd[s][next_fwd[s]]
                end = t + forward_duration(cfg, ref)
                events.append(ScheduleEvent(s, t, end, Pass.FORWARD, ref))
                fwd_end[(s, ref.mini_batch, ref.micro_batch)] = end
                admitted[s].setdefault(ref.mini_batch, None)
                next_fwd[s] += 1
                stage_free[s] = end
        upcoming = [e.end_tick for e in events if e.end_tick > t]
        if not upcoming:
            if len(events) < total:
                raise RuntimeError("scheduler stalled: dependency cycle or admission deadlock")
            break
        t = min(upcoming)
    return Timeline.from_events(events, S)


def build_1f1b(cfg: SimConfig) -> Timeline:
    """One-forward-one-backward timeline; each forward box is a whole mini-batch."""
    validate_config(cfg)
    if cfg.policy.kind.uses_nf1b:
        raise ValueError(f"build_1f1b expects a PipeDream policy, got {cfg.policy.name}")
    return _list_schedule(cfg, [None])


def build_nf1b(cfg: SimConfig) -> Timeline:
    """n-forward-one-backward timeline: m micro-batch forwards, one collective backward."""
    validate_config(cfg)
    if not cfg.policy.kind.uses_nf1b:
        raise ValueError(f"build_nf1b expects a TiMePReSt-family policy, got {cfg.policy.name}")
    return _list_schedule(cfg, list(range(cfg.micro_batches)))


def build_timeline(cfg: SimConfig) -> Timeline:
    if cfg.policy.kind.uses_nf1b:
        return build_nf1b(cfg)
    return build_1f1b(cfg)


# --- verification -----------------------------------------------------------


@dataclass(frozen=True)
class OverlapViolation:
    stage: int
    first: ScheduleEvent
    second: ScheduleEvent


@dataclass(frozen=True)
class DependencyViolation:
    event: ScheduleEvent
    requires: str
    detail: str = ""


@dataclass(frozen=True)
class DurationViolation:
    event: ScheduleEvent
    expected: int


@dataclass(frozen=True)
class ConservationViolation:
    kind: Pass
    expected: int
    found: int


@dataclass(frozen=True)
class CycleViolation:
    cycle: tuple


def _task(e: ScheduleEvent):
    return (e.kind.value, e.stage, e.batch.mini_batch, e.batch.micro_batch)


def dependency_graph(t: Timeline, cfg: SimConfig) -> dict[tuple, set[tuple]]:
    """Task -> predecessors, with data dependencies plus same-stage execution order."""
    S = cfg.stages
    fwd_by = defaultdict(list)
    for e in t.events:
        if e.kind is Pass.FORWARD:
            fwd_by[(e.stage, e.batch.mini_batch)].append(e)
    graph: dict[tuple, set[tuple]] = {}
    for e in t.events:
        preds = set()
        b, k, s = e.batch.mini_batch, e.batch.micro_batch, e.stage
        if e.kind is Pass.FORWARD:
            if s > 0:
                preds.add(("F", s - 1, b, k))
        else:
            preds.update(_task(f) for f in fwd_by[(s, b)])
            if s < S - 1:
                preds.add(("B", s + 1, b, None))
        graph[_task(e)] = preds
    for s in range(S):
        lane = t.on_stage(s)
        for prev, nxt in zip(lane, lane[1:]):
            graph[_task(nxt)].add(_task(prev))
    return graph


def verify_timeline(t: Timeline, cfg: SimConfig) -> list:
    """Return every rule the timeline breaks; an empty list means it is valid."""
    violations: list = []
    S, M = cfg.stages, cfg.mini_batches
    nf1b = cfg.policy.kind.uses_nf1b
    micro_ids = list(range(cfg.micro_batches)) if nf1b else [None]

    for s in range(S):
        lane = sorted(t.on_stage(s), key=lambda e: (e.start_tick, e.end_tick))
        for prev, nxt in zip(lane, lane[1:]):
            if nxt.start_tick < prev.end_tick:
                violations.append(OverlapViolation(s, prev, nxt))

    for e in t.events:
        expected = cfg.bwd_cost if e.kind is Pass.BACKWARD else forward_duration(cfg, e.batch)
        if e.duration != expected:
            violations.append(DurationViolation(e, expected))

    n_fwd, n_bwd = t.count(Pass.FORWARD), t.count(Pass.BACKWARD)
    if n_fwd != S * M * len(micro_ids):
        violations.append(ConservationViolation(Pass.FORWARD, S * M * len(micro_ids), n_fwd))
    if n_bwd != S * M:
        violations.append(ConservationViolation(Pass.BACKWARD, S * M, n_bwd))

    index = {_task(e): e for e in t.events}
    for e in t.events:
        b, k, s = e.batch.mini_batch, e.batch.micro_batch, e.stage
        if e.kind is Pass.FORWARD:
            needs = [("F", s - 1, b, k)] if s > 0 else []
        else:
            needs = [("F", s, b, j) for j in micro_ids]
            if s < S - 1:
                needs.append(("B", s + 1, b, None))
        for need in needs:
            dep = index.get(need)
            if dep is None:
                violations.append(DependencyViolation(e, repr(need), "missing"))
            elif dep.end_tick > e.start_tick:
                violations.append(DependencyViolation(e, repr(need), f"ends at {dep.end_tick}"))

    if t.events and t.epoch_span != max(e.end_tick for e in t.events):
        violations.append(DependencyViolation(t.events[-1], "epoch_span", "span mismatch"))

    try:
        tuple(TopologicalSorter(dependency_graph(t, cfg)).static_order())
    except CycleError as err:
        violations.append(CycleViolation(tuple(err.args[1])))
    return violations


# --- export -----------------------------------------------------------------

TIMELINE_COLUMNS = ("stage", "start_tick", "end_tick", "pass", "mini_batch", "micro_batch")


def timeline_rows(t: Timeline) -> list[dict]:
    rows = []
    for e in sorted(t.events, key=_event_order):
        rows.append({
            "stage": e.stage,
            "start_tick": e.start_tick,
            "end_tick": e.end_tick,
            "pass": e.kind.value,
            "mini_batch": e.batch.mini_batch,
            "micro_batch": "" if e.batch.micro_batch is None else e.batch.micro_batch,
        })
    return rows


def timeline_csv(t: Timeline) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TIMELINE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(timeline_rows(t))
    return buf.getvalue()


def render_gantt(t: Timeline, stages: int) -> str:
    """Stage-by-tick character grid. Forward cells show ``1a``, backward cells ``B1``, idle ``.``."""
    cells = [["."] * t.epoch_span for _ in range(stages)]
    for e in t.events:
        label = e.batch.label() if e.kind is Pass.FORWARD else f"B{e.batch.mini_batch}"
        for tick in range(e.start_tick, e.end_tick):
            cells[e.stage][tick] = label
    width = max((len(c) for row in cells for c in row), default=1)
    lines = []
    for s, row in enumerate(cells):
        lines.append(f"S{s} | " + " ".join(c.ljust(width) for c in row).rstrip())
    return "\n".join(lines)
