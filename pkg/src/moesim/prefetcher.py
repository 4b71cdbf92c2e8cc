"""Look-ahead prefetch requests for the next MoE layer.

Prefill aggregates the predicted top-k sets of all prompt tokens into
per-expert frequencies and requests the most frequent experts; decode
requests the top predicted experts of the single token directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .kernels import route_counts, topk_indices
from .scheduler import PrecisionAssignment
from .traces import Precision, TokenStep


@dataclass(frozen=True)
class PrefetchRequest:
    layer: int
    expert: int
    precision: Precision
    priority: float


@dataclass(frozen=True)
class PrefetchConfig:
    t_prefetch: Optional[int] = None  # None: the next layer's critical count

    def __post_init__(self):
        if self.t_prefetch is not None and self.t_prefetch < 1:
            raise ConfigError("t_prefetch", "must be >= 1")

    def resolve(self, num_experts: int, default: int) -> int:
        t = default if self.t_prefetch is None else self.t_prefetch
        if t > num_experts:
            raise ConfigError("t_prefetch", f"{t} exceeds the {num_experts} experts per layer")
        return t


def predict_topk(step: TokenStep, k: int) -> frozenset:
    if step.predicted_next_gate_scores is None:
        return frozenset()
    return frozenset(int(e) for e in topk_indices(step.predicted_next_gate_scores, k))


def _precision(assignment: Optional[PrecisionAssignment], e: int) -> Precision:
    return Precision.HIGH if assignment is None else assignment[e]


def requests_from_counts(
    counts: np.ndarray, t: int, layer: int, assignment: Optional[PrecisionAssignment] = None
) -> List[PrefetchRequest]:
    order = topk_indices(counts.astype(np.float64), t)
    out = []
    for e in order:
        c = counts[e]
        if c <= 0:
            break
        p = _precision(assignment, int(e))
        if p is Precision.SKIP:
            continue
        out.append(PrefetchRequest(layer, int(e), p, float(c)))
    return out


def prefill_prefetch(
    steps: Sequence[TokenStep],
    cfg: PrefetchConfig,
    k_route: int,
    layer: Optional[int] = None,
    assignment: Optional[PrecisionAssignment] = None,
) -> List[PrefetchRequest]:
    """Top experts by predicted activation frequency over the prompt.

    ``layer`` is the target (next) layer recorded on each request. When an
    ``assignment`` for that layer is given, each request carries its tier and
    skipped experts are dropped; otherwise requests are HIGH.
    """
    steps = [s for s in steps if s.predicted_next_gate_scores is not None]
    if not steps:
        return []
    preds = np.stack([s.predicted_next_gate_scores for s in steps])
    counts = route_counts(preds, k_route)
    m = preds.shape[1]
    t = cfg.resolve(m, m)
    target = -1 if layer is None else layer
    return requests_from_counts(counts, t, target, assignment)


def decode_prefetch(
    step: TokenStep,
    cfg: PrefetchConfig,
    layer: Optional[int] = None,
    assignment: Optional[PrecisionAssignment] = None,
) -> List[PrefetchRequest]:
    """The top ``t_prefetch`` experts of the token's predicted next-layer gates."""
    pred = step.predicted_next_gate_scores
    if pred is None:
        return []
    m = pred.shape[0]
    default = m if assignment is None else max(assignment.num_high, 1)
    t = cfg.resolve(m, default)
    target = -1 if layer is None else layer
    out = []
    for e in topk_indices(pred, t):
        p = _precision(assignment, int(e))
        if p is Precision.SKIP:
            continue
        out.append(PrefetchRequest(target, int(e), p, float(pred[e])))
    return out
