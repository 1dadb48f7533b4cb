"""Logical-time simulator for weight-versioning policies in pipeline-parallel training."""

from .core import ALL_POLICIES, POLICY_NAMES, Policy, PolicyKind, SimConfig, validate_config
from .engine import run_experiment, run_policy
from .scheduler import build_timeline, verify_timeline

__version__ = "0.1.0"

__all__ = [
    "ALL_POLICIES",
    "POLICY_NAMES",
    "Policy",
    "PolicyKind",
    "SimConfig",
    "build_timeline",
    "run_experiment",
    "run_policy",
    "validate_config",
    "verify_timeline",
]
