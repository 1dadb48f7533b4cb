"""Replay a timeline against the toy model, committing SGD updates through the version store."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BatchRef, Pass, PolicyKind, SimConfig, WeightVersion, validate_config
from .model import (
    Dataset,
    StageCache,
    StageModel,
    backward_stage,
    build_stages,
    evaluate,
    forward_stage,
    make_dataset,
    softmax_cross_entropy,
)
from .scheduler import Timeline, build_timeline, verify_timeline
from .staleness import StalenessRecord, VersionHistory
from .versioning import (
    MemoryRow,
    VersionStore,
    begin_backward_pass,
    commit_update,
    memory_report,
    resolve_backward,
    resolve_forward,
)

NOT_REACHED = "not_reached"
BYTES_PER_PARAM = 8


@dataclass
class TrainRun:
    policy: str
    seed: int
    epoch_span: int
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    ticks: list[int] = field(default_factory=list)
    peak_versions: list[int] = field(default_factory=list)
    mean_delta: list[float] = field(default_factory=list)
    max_delta: list[int] = field(default_factory=list)
    staleness: list[StalenessRecord] = field(default_factory=list)
    peak_live_counts: list[int] = field(default_factory=list)
    peak_bytes: list[int] = field(default_factory=list)
    commits_per_stage: list[list[int]] = field(default_factory=list)  # [epoch][stage]
    history: Optional[VersionHistory] = field(default=None, repr=False)

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def backward_deltas(self) -> list[int]:
        return [r.delta for r in self.staleness if r.kind is Pass.BACKWARD]


@dataclass
class RunState:
    """Mutable state carried across epochs of one (policy, seed) run."""

    cfg: SimConfig
    models: list[StageModel]
    store: VersionStore
    dataset: Dataset
    history: VersionHistory = field(default_factory=VersionHistory)
    commits: int = 0


def init_state(cfg: SimConfig, dataset: Optional[Dataset] = None) -> RunState:
    validate_config(cfg)
    if dataset is None:
        dataset = make_dataset(cfg.dataset, cfg.samples, cfg.features, cfg.classes, cfg.seed)
    if dataset.size % (cfg.mini_batches * cfg.micro_batches):
        raise ValueError(
            f"{dataset.size} samples do not split into {cfg.mini_batches} x {cfg.micro_batches} batches")
    models = build_stages(cfg.features, cfg.hidden, cfg.classes, cfg.stages)
    rng = np.random.default_rng([cfg.seed, 1])
    store = VersionStore([m.init_values(rng) for m in models])
    return RunState(cfg, models, store, dataset)


def _batch_rows(cfg: SimConfig, order: np.ndarray, mini: int, micro: Optional[int]) -> np.ndarray:
    size = len(order) // cfg.mini_batches
    rows = order[(mini - 1) * size: mini * size]
    if micro is None:
        return rows
    part = size // cfg.micro_batches
    return rows[micro * part: (micro + 1) * part]


def run_epoch(state: RunState, timeline: Timeline, epoch: int) -> dict:
    """Replay one epoch; return per-epoch staleness records and commit counts.

    Events are processed in tick order. At a given tick every commit (the end
    of a backward box) lands before any box starts, so a box starting at tick
    t sees updates finished at t.
    """
    cfg, store, history = state.cfg, state.store, state.history
    policy = cfg.policy
    S, M = cfg.stages, cfg.mini_batches
    offset = epoch * M  # mini-batch ids are global across epochs
    order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(state.dataset.size)
    X, y = state.dataset.inputs, state.dataset.labels

    actions = []
    for idx, e in enumerate(timeline.events):
        actions.append((e.start_tick, 1, e.stage, idx))
        if e.kind is Pass.BACKWARD:
            actions.append((e.end_tick, 0, e.stage, idx))
    actions.sort()

    caches: dict[tuple[int, Optional[int], int], StageCache] = {}
    upstream: dict[tuple[int, int], np.ndarray] = {}
    pending: dict[tuple[int, int], np.ndarray] = {}
    records: list[StalenessRecord] = []
    commits = [0] * S
    tick0 = epoch * timeline.epoch_span

    for tick, phase, stage, idx in actions:
        e = timeline.events[idx]
        gb = e.batch.mini_batch + offset
        abs_tick = tick0 + tick
        if phase == 0:
            new_id = store.latest_id(stage) + 1
            base, step = pending.pop((stage, gb))
            if base is None:
                base = store.latest(stage).values
            commit_update(store, policy, stage, WeightVersion(new_id, gb, base - step), consumer=gb)
            history.record_commit(stage, abs_tick, new_id)
            commits[stage] += 1
            continue

        if e.kind is Pass.FORWARD:
            micro = e.batch.micro_batch
            ref = BatchRef(gb, micro)
            if stage == 0:
                inputs = X[_batch_rows(cfg, order, e.batch.mini_batch, micro)]
            else:
                inputs = caches[(gb, micro, stage - 1)].outputs
            rw = resolve_forward(store, policy, stage, ref)
            history.record_forward(stage, gb, abs_tick)
            caches[(gb, micro, stage)] = StageCache(inputs, forward_stage(state.models[stage], rw, inputs))
            records.append(StalenessRecord(stage, gb, rw.delta, Pass.FORWARD, micro, rw.version_id, abs_tick, epoch))
            continue

        micros = [None] if not policy.kind.uses_nf1b else list(range(cfg.micro_batches))
        parts = [caches.pop((gb, k, stage)) for k in micros]
        cache = StageCache(np.concatenate([p.inputs for p in parts]), np.concatenate([p.outputs for p in parts]))
        if stage == S - 1:
            begin_backward_pass(store, policy, gb)
            labels = y[_batch_rows(cfg, order, e.batch.mini_batch, None)]
            # micro-batches are equal-sized, so the mini-batch mean is the mean of micro-batch means
            _, grad_out = softmax_cross_entropy(cache.outputs, labels)
        else:
            grad_out = upstream.pop((gb, stage))
        rw = resolve_backward(store, policy, stage, BatchRef(gb), clamp_min=cfg.clamp_factor_min)
        grad, downstream = backward_stage(state.models[stage], rw, cache, grad_out)
        if stage > 0:
            upstream[(gb, stage - 1)] = downstream
        base = rw.values if cfg.update_base == "resolved" else None
        pending[(stage, gb)] = (base, cfg.lr * grad)
        records.append(StalenessRecord(stage, gb, rw.delta, Pass.BACKWARD, None, rw.version_id, abs_tick, epoch))

    if pending or upstream or caches:
        raise RuntimeError("epoch ended with unfinished work; timeline is incomplete")
    return {"records": records, "commits": commits}


def run_policy(cfg: SimConfig, dataset: Optional[Dataset] = None,
               timeline: Optional[Timeline] = None) -> TrainRun:
    state = init_state(cfg, dataset)
    if timeline is None:
        timeline = build_timeline(cfg)
        problems = verify_timeline(timeline, cfg)
        if problems:
            raise RuntimeError(f"generated timeline failed verification: {problems[:3]}")
    run = TrainRun(cfg.policy.name, cfg.seed, timeline.epoch_span)
    param_bytes = [m.n_params * BYTES_PER_PARAM for m in state.models]
    for epoch in range(cfg.epochs):
        out = run_epoch(state, timeline, epoch)
        latest = [state.store.latest(s).values for s in range(cfg.stages)]
        loss, acc = evaluate(state.models, latest, state.dataset.inputs, state.dataset.labels)
        deltas = [r.delta for r in out["records"] if r.kind is Pass.BACKWARD]
        run.loss.append(loss)
        run.accuracy.append(acc)
        run.ticks.append((epoch + 1) * timeline.epoch_span)
        run.peak_versions.append(max(state.store.peak_live_counts))
        run.mean_delta.append(sum(deltas) / len(deltas))
        run.max_delta.append(max(deltas))
        run.staleness.extend(out["records"])
        run.commits_per_stage.append(out["commits"])
    run.peak_live_counts = state.store.peak_live_counts
    run.peak_bytes = memory_report(state.store, param_bytes)
    run.history = state.history
    return run


def epochs_to_threshold(series: Sequence[float], threshold: float, below: bool = True):
    """1-based epoch at which ``series`` first crosses ``threshold``; NOT_REACHED otherwise."""
    for i, v in enumerate(series):
        if (v <= threshold) if below else (v >= threshold):
            return i + 1
    return NOT_REACHED


def ticks_to_threshold(run: TrainRun, threshold: float, below: bool = True):
    ep = epochs_to_threshold(run.loss if below else run.accuracy, threshold, below)
    return NOT_REACHED if ep == NOT_REACHED else run.ticks[ep - 1]


def throughput(run: TrainRun) -> float:
    """Epochs per simulated tick."""
    return 1.0 / run.epoch_span


@dataclass(frozen=True)
class Thresholds:
    loss: float = 0.35
    accuracy: float = 0.85


def run_experiment(cfg: SimConfig, policies: Sequence[str | PolicyKind],
                   dataset: Optional[Dataset] = None) -> list[TrainRun]:
    """One TrainRun per policy, all sharing cfg's seed, dataset and initial weights."""
    if dataset is None:
        validate_config(cfg)
        dataset = make_dataset(cfg.dataset, cfg.samples, cfg.features, cfg.classes, cfg.seed)
    return [run_policy(cfg.with_policy(p), dataset) for p in policies]


def _median(values: list) -> object:
    numeric = [math.inf if v == NOT_REACHED else v for v in values]
    med = statistics.median(numeric)
    if math.isinf(med):
        return NOT_REACHED
    return int(med) if float(med).is_integer() else med


def summarize(runs: Sequence[TrainRun], thresholds: Thresholds) -> dict:
    """Per-policy medians across seeds of threshold crossings and peak memory."""
    by_policy: dict[str, list[TrainRun]] = {}
    for r in runs:
        by_policy.setdefault(r.policy, []).append(r)
    out = {}
    for name, rs in by_policy.items():
        rs = sorted(rs, key=lambda r: r.seed)
        out[name] = {
            "seeds": [r.seed for r in rs],
            "epoch_span": rs[0].epoch_span,
            "throughput_epochs_per_tick": throughput(rs[0]),
            "epochs_to_loss_threshold": _median([epochs_to_threshold(r.loss, thresholds.loss) for r in rs]),
            "ticks_to_loss_threshold": _median([ticks_to_threshold(r, thresholds.loss) for r in rs]),
            "epochs_to_accuracy_threshold": _median(
                [epochs_to_threshold(r.accuracy, thresholds.accuracy, below=False) for r in rs]),
            "ticks_to_accuracy_threshold": _median(
                [ticks_to_threshold(r, thresholds.accuracy, below=False) for r in rs]),
            "per_seed_epochs_to_loss_threshold": [epochs_to_threshold(r.loss, thresholds.loss) for r in rs],
            "final_loss_median": statistics.median(r.loss[-1] for r in rs),
            "final_accuracy_median": statistics.median(r.accuracy[-1] for r in rs),
            "peak_live_versions_per_stage": rs[0].peak_live_counts,
            "peak_bytes_per_stage": rs[0].peak_bytes,
            "mean_backward_delta": statistics.median(
                sum(r.backward_deltas()) / len(r.backward_deltas()) for r in rs),
        }
    return {"thresholds": {"loss": thresholds.loss, "accuracy": thresholds.accuracy}, "policies": out}


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


TRAINRUN_COLUMNS = ("epoch", "loss", "top1_acc", "ticks_elapsed", "peak_versions", "mean_delta", "max_delta")


def trainrun_csv(run: TrainRun) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAINRUN_COLUMNS)
    for i in range(run.epochs):
        writer.writerow([i + 1, repr(run.loss[i]), repr(run.accuracy[i]), run.ticks[i],
                         run.peak_versions[i], repr(run.mean_delta[i]), run.max_delta[i]])
    return buf.getvalue()


def memory_rows(run: TrainRun) -> list[MemoryRow]:
    return [MemoryRow(run.policy, s, n, b)
            for s, (n, b) in enumerate(zip(run.peak_live_counts, run.peak_bytes))]
