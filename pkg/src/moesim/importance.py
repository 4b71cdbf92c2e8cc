"""Per-expert importance for one MoE layer.

Prefill ranks experts by how many heavy-hitter tokens (top tokens by
attention importance) they receive. Decode uses the token's gate scores as
they are.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .kernels import route_counts, topk_indices
from .traces import ModelSpec, TokenStep


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class ImportanceScores:
    layer: int
    phase: Phase
    scores: np.ndarray


@dataclass(frozen=True)
class HeavyHitterConfig:
    k_tokens: int

    def __post_init__(self):
        if self.k_tokens < 1:
            raise ConfigError("k_tokens", "must be >= 1")


def default_k_tokens(num_prompt_tokens: int) -> int:
    """ceil(0.2 * prompt length), at least one token."""
    return max(1, math.ceil(0.2 * num_prompt_tokens))


def select_heavy_hitters(steps: Sequence[TokenStep], cfg: HeavyHitterConfig) -> frozenset:
    """Token ids of the ``cfg.k_tokens`` steps with the largest attention importance."""
    if cfg.k_tokens > len(steps):
        raise ConfigError("k_tokens", f"{cfg.k_tokens} exceeds the {len(steps)} prompt tokens")
    s = np.array([st.attention_importance for st in steps], dtype=np.float64)
    idx = topk_indices(s, cfg.k_tokens)
    return frozenset(steps[i].token_id for i in idx)


def prefill_importance(
    steps: Sequence[TokenStep], heavy: Iterable[int], spec: ModelSpec, layer: int = 0
) -> ImportanceScores:
    """Count, per expert, the heavy tokens whose top-k routing includes it."""
    heavy = set(heavy)
    rows = [i for i, st in enumerate(steps) if st.token_id in heavy]
    if not rows:
        return ImportanceScores(layer, Phase.PREFILL, np.zeros(spec.num_experts, dtype=np.int64))
    gates = np.stack([steps[i].gate_scores for i in rows])
    counts = route_counts(gates, spec.routing_topk)
    return ImportanceScores(layer, Phase.PREFILL, counts)


def prefill_importance_from_gates(gates: np.ndarray, heavy_rows, k_route: int, layer: int) -> ImportanceScores:
    """Array form of :func:`prefill_importance` used by the engine's inner loop."""
    counts = route_counts(gates, k_route, np.asarray(sorted(heavy_rows), dtype=np.int64))
    return ImportanceScores(layer, Phase.PREFILL, counts)


def decode_importance(step: TokenStep, layer: int = 0) -> ImportanceScores:
    return ImportanceScores(layer, Phase.DECODE, step.gate_scores)
