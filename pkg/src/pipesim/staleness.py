"""Staleness degree, exponential significance, and the intermediate-weight transform."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NonPositiveLambda, Pass


class UnknownVersion(LookupError):
    pass


@dataclass(frozen=True)
class DecayParams:
    lam: float = 0.5

    def __post_init__(self):
        if not self.lam > 0:
            raise NonPositiveLambda(f"lambda={self.lam}")


@dataclass(frozen=True)
class StalenessRecord:
    """One weight resolution and how many same-stage commits it missed."""

    stage: int
    mini_batch: int
    delta: int
    kind: Pass = Pass.BACKWARD
    micro_batch: Optional[int] = None
    version_id: int = 0
    tick: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


def significance(delta: int, params: DecayParams) -> float:
    """exp(-lambda * delta): 1 at zero staleness, strictly decreasing after."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    return math.exp(-params.lam * delta)


def intermediate_factor(f: float) -> float:
    """2 - 1/f. Equals 1 at f=1, 0 at f=1/2, negative below; never clamped here."""
    if not 0 < f <= 1:
        raise ValueError(f"significance must lie in (0, 1], got {f}")
    return 2.0 - 1.0 / f


def intermediate_weights(stale: np.ndarray, delta: int, params: DecayParams,
                         clamp_min: Optional[float] = None) -> np.ndarray:
    stale = np.asarray(stale, dtype=float)
    if stale.size == 0:
        raise ValueError("stale weights must be non-empty")
    factor = intermediate_factor(significance(delta, params))
    if clamp_min is not None:
        factor = max(factor, clamp_min)
    if factor == 1.0:
        return stale.copy()
    return factor * stale


@dataclass
class VersionHistory:
    """Commit log per stage plus the tick at which each mini-batch's forward resolved weights."""

    commits: dict[int, list[tuple[int, int]]] = field(default_factory=lambda: defaultdict(list))
    forward_ticks: dict[tuple[int, int], int] = field(default_factory=dict)

    def record_commit(self, stage: int, tick: int, version_id: int) -> None:
        self.commits[stage].append((tick, version_id))

    def record_forward(self, stage: int, mini_batch: int, tick: int) -> None:
        # the earliest micro-batch forward fixes the stale base for the mini-batch
        self.forward_ticks.setdefault((stage, mini_batch), tick)


def delta_of(event, history: VersionHistory, cutoff: Optional[int] = None) -> StalenessRecord:
    """Count commits at ``event.stage`` in (forward resolution tick, cutoff].

    ``cutoff`` defaults to the event's start tick. Commits landing on the same
    tick as a resolution are visible to it, hence the half-open interval.
    """
    if event.kind is not Pass.BACKWARD:
        raise ValueError("delta_of expects a backward event")
    key = (event.stage, event.batch.mini_batch)
    if key not in history.forward_ticks:
        raise UnknownVersion(f"no forward resolution recorded for stage {key[0]}, mini-batch {key[1]}")
    since = history.forward_ticks[key]
    until = event.start_tick if cutoff is None else cutoff
    delta = sum(1 for tick, _ in history.commits.get(event.stage, ()) if since < tick <= until)
    return StalenessRecord(event.stage, event.batch.mini_batch, delta, tick=event.start_tick)
