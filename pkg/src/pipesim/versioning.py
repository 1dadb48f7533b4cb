"""Per-stage weight-version store, the four policies' resolution rules, and memory accounting.

Resolution rules, per stage:

==========  =====================================  ===============================================
policy      forward                                backward
==========  =====================================  ===============================================
PipeDream   latest, pinned for the mini-batch      the pinned forward version (vertical stash)
TiMePReSt   latest                                 latest as of the backward *pass* start
VTiMePReSt  latest                                 latest
ITiMePReSt  latest; first micro-batch pins a base  (2 - 1/f(delta)) * base, delta = commits between
                                                   base and the backward pass start
==========  =====================================  ===============================================

A version is evicted once it is neither the latest nor referenced by an
in-flight mini-batch. VTiMePReSt never references anything, so a commit
leaves exactly one live version behind.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .core import BatchRef, Policy, PolicyKind, WeightVersion
from .staleness import DecayParams, intermediate_weights


class MissingVersion(LookupError):
    """A policy asked for a version that was already evicted (a retention bug)."""


class NonMonotonicVersion(ValueError):
    pass


class Source(str, Enum):
    LATEST = "Latest"
    STASHED = "Stashed"
    INTERMEDIATE = "Intermediate"


@dataclass(frozen=True, eq=False)
class ResolvedWeights:
    stage: int
    values: np.ndarray
    source: Source
    version_id: int  # version the values derive from
    delta: int = 0   # same-stage commits newer than ``version_id`` that this resolution ignores


@dataclass
class _Lane:
    live: dict[int, WeightVersion]
    latest: int
    refs: dict[int, set[int]] = field(default_factory=dict)  # version_id -> consumer mini-batches
    peak: int = 1


class VersionStore:
    """Live weight versions per stage, with reference-counted retention."""

    def __init__(self, initial: list[np.ndarray]):
        self._lanes = [_Lane({0: WeightVersion(0, None, np.array(v, dtype=float))}, 0) for v in initial]
        # (stage, mini) -> version id, one map per purpose
        self.forward_pins: dict[tuple[int, int], int] = {}
        self.backward_snapshots: dict[tuple[int, int], int] = {}

    @property
    def stages(self) -> int:
        return len(self._lanes)

    def latest(self, stage: int) -> WeightVersion:
        lane = self._lanes[stage]
        return lane.live[lane.latest]

    def latest_id(self, stage: int) -> int:
        return self._lanes[stage].latest

    def get(self, stage: int, version_id: int) -> WeightVersion:
        try:
            return self._lanes[stage].live[version_id]
        except KeyError:
            raise MissingVersion(f"stage {stage}: version {version_id} is not live") from None

    def live_ids(self, stage: int) -> list[int]:
        return sorted(self._lanes[stage].live)

    def live_count(self, stage: int) -> int:
        return len(self._lanes[stage].live)

    @property
    def peak_live_counts(self) -> list[int]:
        return [lane.peak for lane in self._lanes]

    def consumer_refs(self, stage: int) -> dict[int, set[int]]:
        return {vid: set(c) for vid, c in self._lanes[stage].refs.items()}

    def acquire(self, stage: int, version_id: int, consumer: int) -> None:
        self.get(stage, version_id)
        self._lanes[stage].refs.setdefault(version_id, set()).add(consumer)

    def release(self, stage: int, consumer: int) -> None:
        lane = self._lanes[stage]
        for vid in list(lane.refs):
            lane.refs[vid].discard(consumer)
            if not lane.refs[vid]:
                del lane.refs[vid]
        self.evict_unreferenced(stage)

    def append(self, stage: int, new: WeightVersion) -> None:
        lane = self._lanes[stage]
        if new.version_id != lane.latest + 1:
            raise NonMonotonicVersion(
                f"stage {stage}: expected version {lane.latest + 1}, got {new.version_id}")
        lane.live[new.version_id] = new
        lane.latest = new.version_id

    def evict_all_but_latest(self, stage: int) -> None:
        lane = self._lanes[stage]
        lane.live = {lane.latest: lane.live[lane.latest]}
        lane.refs.clear()

    def evict_unreferenced(self, stage: int) -> None:
        lane = self._lanes[stage]
        for vid in list(lane.live):
            if vid != lane.latest and vid not in lane.refs:
                del lane.live[vid]

    def mark_boundary(self) -> None:
        """Fold current live counts into the per-stage peaks."""
        for lane in self._lanes:
            lane.peak = max(lane.peak, len(lane.live))


def _recorded(table: dict, key: tuple[int, int]) -> int:
    try:
        return table[key]
    except KeyError:
        raise MissingVersion(f"stage {key[0]}: nothing recorded for mini-batch {key[1]}") from None


def _resolved(store: VersionStore, stage: int, version: WeightVersion, delta: int = 0) -> ResolvedWeights:
    source = Source.LATEST if version.version_id == store.latest_id(stage) else Source.STASHED
    return ResolvedWeights(stage, version.values, source, version.version_id, delta)


def resolve_forward(store: VersionStore, policy: Policy, stage: int, batch: BatchRef) -> ResolvedWeights:
    key = (stage, batch.mini_batch)
    kind = policy.kind
    if kind is PolicyKind.PIPEDREAM:
        if key not in store.forward_pins:
            vid = store.latest_id(stage)
            store.forward_pins[key] = vid
            store.acquire(stage, vid, batch.mini_batch)
        return _resolved(store, stage, store.get(stage, store.forward_pins[key]))
    if kind is PolicyKind.ITIMEPREST and key not in store.forward_pins:
        vid = store.latest_id(stage)
        store.forward_pins[key] = vid
        store.acquire(stage, vid, batch.mini_batch)
    return _resolved(store, stage, store.latest(stage))


def begin_backward_pass(store: VersionStore, policy: Policy, mini_batch: int) -> None:
    """Called when a mini-batch's backward starts at the last stage.

    TiMePReSt and ITiMePReSt fix, for every stage, which commits the backward
    pass may see; later commits are excluded to keep the pass horizontally
    consistent.
    """
    if policy.kind not in (PolicyKind.TIMEPREST, PolicyKind.ITIMEPREST):
        return
    for stage in range(store.stages):
        vid = store.latest_id(stage)
        store.backward_snapshots[(stage, mini_batch)] = vid
        if policy.kind is PolicyKind.TIMEPREST:
            store.acquire(stage, vid, mini_batch)


def resolve_backward(store: VersionStore, policy: Policy, stage: int, batch: BatchRef,
                     delta: Optional[int] = None, clamp_min: Optional[float] = None) -> ResolvedWeights:
    key = (stage, batch.mini_batch)
    kind = policy.kind
    now = store.latest_id(stage)
    if kind is PolicyKind.VTIMEPREST:
        return _resolved(store, stage, store.latest(stage))
    if kind is PolicyKind.PIPEDREAM:
        vid = _recorded(store.forward_pins, key)
        return _resolved(store, stage, store.get(stage, vid), now - vid)
    if kind is PolicyKind.TIMEPREST:
        vid = _recorded(store.backward_snapshots, key)
        return _resolved(store, stage, store.get(stage, vid), now - vid)

    base = store.get(stage, _recorded(store.forward_pins, key))
    del store.forward_pins[key]
    if delta is None:
        delta = _recorded(store.backward_snapshots, key) - base.version_id
    values = intermediate_weights(base.values, delta, DecayParams(policy.lam), clamp_min)
    store.backward_snapshots.pop(key, None)
    # the stale base is no longer needed once the intermediate weights exist
    store.release(stage, batch.mini_batch)
    return ResolvedWeights(stage, values, Source.INTERMEDIATE, base.version_id, delta)


def commit_update(store: VersionStore, policy: Policy, stage: int, new: WeightVersion,
                  consumer: Optional[int] = None) -> VersionStore:
    """Append ``new`` and evict per policy. ``consumer`` is the mini-batch whose backward finished."""
    store.append(stage, new)
    if policy.kind is PolicyKind.VTIMEPREST:
        store.evict_all_but_latest(stage)
    else:
        if consumer is None:
            store.evict_unreferenced(stage)
        else:
            if policy.kind is PolicyKind.PIPEDREAM:
                store.forward_pins.pop((stage, consumer), None)
            store.backward_snapshots.pop((stage, consumer), None)
            store.release(stage, consumer)
    store.mark_boundary()
    return store


@dataclass(frozen=True)
class MemoryRow:
    policy: str
    stage: int
    peak_live_versions: int
    peak_bytes: int


def memory_report(store: VersionStore, param_bytes_per_stage: int | list[int]) -> list[int]:
    """Per-stage peak bytes held by live weight versions."""
    if isinstance(param_bytes_per_stage, int):
        param_bytes_per_stage = [param_bytes_per_stage] * store.stages
    return [p * b for p, b in zip(store.peak_live_counts, param_bytes_per_stage)]


MEMORY_COLUMNS = ("policy", "stage", "peak_live_versions", "peak_bytes")


def memory_csv(rows: list[MemoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MEMORY_COLUMNS)
    for r in rows:
        writer.writerow([r.policy, r.stage, r.peak_live_versions, r.peak_bytes])
    return buf.getvalue()
