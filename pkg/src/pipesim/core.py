"""Domain types shared across the simulator: policies, batches, weight versions, config."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np

DEFAULT_LAMBDA = 0.5


class PolicyKind(str, Enum):
    PIPEDREAM = "PipeDream"
    TIMEPREST = "TiMePReSt"
    VTIMEPREST = "VTiMePReSt"
    ITIMEPREST = "ITiMePReSt"

    @property
    def uses_nf1b(self) -> bool:
        return self is not PolicyKind.PIPEDREAM

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        key = name.replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise UnknownPolicy(name)


ALL_POLICIES = tuple(PolicyKind)
POLICY_NAMES = tuple(k.value for k in PolicyKind)


class Pass(str, Enum):
    FORWARD = "F"
    BACKWARD = "B"


class ConfigError(ValueError):
    """Base for rejected configurations; ``code`` names the violated rule."""

    code = "InvalidConfig"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


class StageCountTooSmall(ConfigError):
    code = "StageCountTooSmall"


class MicroBatchCountTooSmall(ConfigError):
    code = "MicroBatchCountTooSmall"


class NonPositiveLambda(ConfigError):
    code = "NonPositiveLambda"


class NonPositiveCount(ConfigError):
    code = "NonPositiveCount"


class UnknownPolicy(ConfigError):
    code = "UnknownPolicy"

    def __init__(self, name: str):
        super().__init__(f"{name!r}; valid policies: {', '.join(POLICY_NAMES)}")


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind = PolicyKind.ITIMEPREST
    lam: float = DEFAULT_LAMBDA

    @classmethod
    def of(cls, kind: str | PolicyKind, lam: float = DEFAULT_LAMBDA) -> "Policy":
        if not isinstance(kind, PolicyKind):
            kind = PolicyKind.parse(kind)
        return cls(kind, float(lam))

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class BatchRef:
    """A mini-batch, optionally narrowed to one of its micro-batches.

    ``micro_batch`` is None for backward events (one collective backward per
    mini-batch) and for PipeDream forwards, which process the whole mini-batch.
    """

    mini_batch: int
    micro_batch: Optional[int] = None

    def label(self) -> str:
        if self.micro_batch is None:
            return str(self.mini_batch)
        return f"{self.mini_batch}{_micro_letter(self.micro_batch)}"


def _micro_letter(k: int) -> str:
    letters = ""
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        letters = chr(ord("a") + r) + letters
    return letters


@dataclass(frozen=True, eq=False)
class WeightVersion:
    version_id: int
    produced_by: Optional[int]  # mini-batch whose update made it; None for the initial weights
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)


@dataclass(frozen=True)
class SimConfig:
    stages: int = 4
    mini_batches: int = 8
    micro_batches: int = 2
    fwd_cost: int = 1
    bwd_cost: int = 2
    epochs: int = 30
    seed: int = 0
    policy: Policy = field(default_factory=Policy)
    # toy-trainer knobs
    lr: float = 0.05
    hidden: int = 16
    dataset: str = "blobs"
    samples: int = 960
    features: int = 8
    classes: int = 3
    clamp_factor_min: Optional[float] = None
    update_base: str = "latest"  # "latest" | "resolved": which weights the SGD step is applied to

    def with_policy(self, kind: str | PolicyKind) -> "SimConfig":
        return replace(self, policy=Policy.of(kind, self.policy.lam))

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            if f.name == "policy":
                out["policy"] = self.policy.name
                out["lambda"] = self.policy.lam
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        kind = data.pop("policy", PolicyKind.ITIMEPREST)
        lam = data.pop("lambda", DEFAULT_LAMBDA)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(policy=Policy.of(kind, lam), **data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def validate_config(cfg: SimConfig) -> SimConfig:
    if cfg.stages < 2:
        raise StageCountTooSmall(f"stages={cfg.stages}, need at least 2")
    if cfg.micro_batches < 1:
        raise MicroBatchCountTooSmall(f"micro_batches={cfg.micro_batches}")
    if cfg.policy.kind is PolicyKind.ITIMEPREST and not cfg.policy.lam > 0:
        raise NonPositiveLambda(f"lambda={cfg.policy.lam}")
    for name in ("mini_batches", "fwd_cost", "bwd_cost", "epochs", "hidden", "samples", "features"):
        if getattr(cfg, name) < 1:
            raise NonPositiveCount(f"{name}={getattr(cfg, name)}")
    if cfg.classes < 2:
        raise NonPositiveCount(f"classes={cfg.classes}, need at least 2")
    if not cfg.lr > 0:
        raise ConfigError(f"lr={cfg.lr} must be positive")
    return cfg


__all__ = [
    "ALL_POLICIES",
    "BatchRef",
    "ConfigError",
    "DEFAULT_LAMBDA",
    "MicroBatchCountTooSmall",
    "NonPositiveCount",
    "NonPositiveLambda",
    "POLICY_NAMES",
    "Pass",
    "Policy",
    "PolicyKind",
    "SimConfig",
    "StageCountTooSmall",
    "UnknownPolicy",
    "WeightVersion",
    "validate_config",
]
