"""Depth-aware precision scheduling.

The retention ratio falls from 1 at the first layer to ``lam`` at the last
along a half cosine; a layer keeps ``ceil(r * M)`` of its experts at high
precision and demotes the rest to the configured low tier (``LOW`` for the
4/2 configuration, ``SKIP`` for 4/0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .importance import ImportanceScores
from .kernels import topk_indices
from .traces import ModelSpec, Precision


@dataclass(frozen=True)
class PolicyConfig:
    lam: float = 0.5
    low_tier: Precision = Precision.LOW

    def __post_init__(self):
        object.__setattr__(self, "low_tier", Precision(self.low_tier))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", "must be in [0, 1]")
        if self.low_tier is Precision.HIGH:
            raise ConfigError("low_tier", "must be 'low' or 'skip'")

    @property
    def label(self) -> str:
        return "4/2" if self.low_tier is Precision.LOW else "4/0"


@dataclass(frozen=True)
class PrecisionAssignment:
    layer: int
    tier: tuple
    num_high: int

    def __getitem__(self, expert: int) -> Precision:
        return self.tier[expert]

    @property
    def high_set(self) -> frozenset:
        return frozenset(e for e, t in enumerate(self.tier) if t is Precision.HIGH)


def lam_from_mean_retention(mean_r: float) -> float:
    """The schedule averages (1 + lam) / 2 over depth, so lam = 2 * mean_r - 1."""
    if not 0.5 <= mean_r <= 1.0:
        raise ConfigError("retention", "mean retention must lie in [0.5, 1]")
    return 2.0 * mean_r - 1.0


def retention_ratio(layer: int, num_layers: int, lam: float) -> float:
    if not 0 <= layer < num_layers:
        raise ValueError(f"layer {layer} outside [0, {num_layers})")
    if num_layers == 1 or layer == 0:
        return 1.0
    c = (math.cos(math.pi * layer / (num_layers - 1)) + 1.0) / 2.0
    return (1.0 - lam) * c + lam


def critical_count(layer: int, num_layers: int, lam: float, num_experts: int, min_count: int = 0) -> int:
    """ceil(r(layer) * num_experts), raised to ``min_count`` and capped at ``num_experts``."""
    t = math.ceil(retention_ratio(layer, num_layers, lam) * num_experts)
    return min(num_experts, max(t, min_count))


def _from_high(layer: int, high, m: int, low_tier: Precision) -> PrecisionAssignment:
    tier = [low_tier] * m
    for e in high:
        tier[int(e)] = Precision.HIGH
    return PrecisionAssignment(layer, tuple(tier), len(high))


def uniform_assignment(layer: int, num_experts: int) -> PrecisionAssignment:
    return PrecisionAssignment(layer, (Precision.HIGH,) * num_experts, num_experts)


def assign_precisions(
    scores: ImportanceScores, layer: int, spec: ModelSpec, policy: PolicyConfig
) -> PrecisionAssignment:
    """Mark the top ``t_l`` experts by importance HIGH, the rest ``policy.low_tier``.

    ``t_l`` never drops below the routing top-k so a layer always has at
    least its routed width available at high precision.
    """
    if scores.layer != layer:
        raise ValueError(f"scores are for layer {scores.layer}, not {layer}")
    m = spec.num_experts
    t = critical_count(layer, spec.num_layers, policy.lam, m, min_count=min(spec.routing_topk, m))
    high = topk_indices(np.asarray(scores.scores, dtype=np.float64), t)
    return _from_high(layer, high, m, policy.low_tier)


def decode_high_count(gates, routed, retention: float) -> int:
    """Number of routed experts (ranked by gate) kept HIGH for a single token.

    Keeps the shortest gate-ranked prefix of the routed set that covers a
    ``retention`` share of the routed gate mass, and at least one expert.
    """
    k = len(routed)
    if retention >= 1.0 or k == 0:
        return k
    mass = np.asarray(gates, dtype=np.float64)[np.asarray(routed)]
    target = retention * float(mass.sum())
    acc = 0.0
    for i in range(k):
        acc += float(mass[i])
        if acc >= target:
            return i + 1
    return k


def assign_decode_precisions(
    gates, layer: int, spec: ModelSpec, policy: PolicyConfig
) -> PrecisionAssignment:
    """Precision assignment for one decode token at ``layer``.

    A single token only activates its routed experts, so the retention ratio
    is applied to the routed gate mass rather than to all ``M`` experts.
    Non-routed experts take the low tier; the engine never touches them.
    """
    gates = np.asarray(gates, dtype=np.float64)
    routed = topk_indices(gates, spec.routing_topk)
    r = retention_ratio(layer, spec.num_layers, policy.lam)
    n_high = decode_high_count(gates, routed, r)
    return _from_high(layer, routed[:n_high], spec.num_experts, policy.low_tier)
