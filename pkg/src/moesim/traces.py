"""Trace data model and the synthetic trace generator.

A trace records, for one request, the router output of every MoE layer for
every prompt token (prefill) and every generated token (decode), together
with the look-ahead gate prediction for the next layer and the per-token
attention importance used to pick heavy-hitter tokens.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

from .errors import ConfigError, TraceSchemaError

DIST_TOL = 1e-6


class Precision(str, enum.Enum):
    HIGH = "high"
    LOW = "low"
    SKIP = "skip"

    def satisfies(self, requested: "Precision") -> bool:
        """Whether weights at this precision can serve ``requested``."""
        if self is Precision.SKIP or requested is Precision.SKIP:
            return False
        return self is Precision.HIGH or requested is Precision.LOW


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    num_experts: int
    routing_topk: int
    expert_bytes: Mapping[Precision, int]
    attention_bytes_per_layer: int = 0

    def __post_init__(self):
        eb = {Precision(k): int(v) for k, v in dict(self.expert_bytes).items()}
        object.__setattr__(self, "expert_bytes", eb)
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if self.num_experts < 1:
            raise ConfigError("num_experts", "must be >= 1")
        if not 1 <= self.routing_topk <= self.num_experts:
            raise ConfigError("routing_topk", "must satisfy 1 <= routing_topk <= num_experts")
        if set(eb) != {Precision.HIGH, Precision.LOW}:
            raise ConfigError("expert_bytes", "needs exactly 'high' and 'low' entries")
        if not eb[Precision.HIGH] > eb[Precision.LOW] > 0:
            raise ConfigError("expert_bytes", "requires high > low > 0")
        if self.attention_bytes_per_layer < 0:
            raise ConfigError("attention_bytes_per_layer", "must be >= 0")

    def bytes_for(self, precision: Precision) -> int:
        if precision is Precision.SKIP:
            return 0
        return self.expert_bytes[precision]

    @property
    def total_expert_bytes_high(self) -> int:
        return self.num_layers * self.num_experts * self.expert_bytes[Precision.HIGH]

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "routing_topk": self.routing_topk,
            "expert_bytes": {p.value: b for p, b in self.expert_bytes.items()},
            "attention_bytes_per_layer": self.attention_bytes_per_layer,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        return cls(
            num_layers=int(d["num_layers"]),
            num_experts=int(d["num_experts"]),
            routing_topk=int(d["routing_topk"]),
            expert_bytes={Precision(k): int(v) for k, v in d["expert_bytes"].items()},
            attention_bytes_per_layer=int(d.get("attention_bytes_per_layer", 0)),
        )


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class TokenStep:
    token_id: int
    gate_scores: np.ndarray
    predicted_next_gate_scores: Optional[np.ndarray] = None
    attention_importance: Optional[float] = None

    def __post_init__(self):
        self.gate_scores = _frozen(self.gate_scores)
        if self.predicted_next_gate_scores is not None:
            self.predicted_next_gate_scores = _frozen(self.predicted_next_gate_scores)
        if self.attention_importance is not None:
            self.attention_importance = float(self.attention_importance)

    def __eq__(self, other):
        if not isinstance(other, TokenStep):
            return NotImplemented
        if self.token_id != other.token_id or self.attention_importance != other.attention_importance:
            return False
        if not np.array_equal(self.gate_scores, other.gate_scores):
            return False
        a, b = self.predicted_next_gate_scores, other.predicted_next_gate_scores
        if a is None or b is None:
            return a is b
        return np.array_equal(a, b)

    def routed(self, k: int) -> np.ndarray:
        from .kernels import topk_indices

        return topk_indices(self.gate_scores, k)


@dataclass(eq=False)
class InferenceTrace:
    model: ModelSpec
    prefill: list  # [L][T] of TokenStep
    decode: list  # [steps][L] of TokenStep
    metadata: dict = field(default_factory=dict)

    @property
    def num_prompt_tokens(self) -> int:
        return len(self.prefill[0]) if self.prefill else 0

    @property
    def num_decode_steps(self) -> int:
        return len(self.decode)

    @property
    def num_records(self) -> int:
        return sum(len(row) for row in self.prefill) + sum(len(s) for s in self.decode)

    def prefill_gates(self, layer: int) -> np.ndarray:
        return np.stack([s.gate_scores for s in self.prefill[layer]])

    def prefill_predictions(self, layer: int) -> Optional[np.ndarray]:
        steps = self.prefill[layer]
        if not steps or steps[0].predicted_next_gate_scores is None:
            return None
        return np.stack([s.predicted_next_gate_scores for s in steps])

    def __eq__(self, other):
        if not isinstance(other, InferenceTrace):
            return NotImplemented
        return (
            self.model == other.model
            and self.metadata == other.metadata
            and self.prefill == other.prefill
            and self.decode == other.decode
        )

    def validate(self) -> None:
        """Check dimensions and distribution invariants; raise TraceSchemaError."""
        m = self.model
        if len(self.prefill) != m.num_layers:
            raise TraceSchemaError(f"prefill has {len(self.prefill)} layers, model has {m.num_layers}")
        widths = {len(row) for row in self.prefill}
        if len(widths) > 1:
            raise TraceSchemaError("prefill grid is not rectangular")
        for layer, row in enumerate(self.prefill):
            for s in row:
                check_step(s, m, layer, "prefill")
                if s.attention_importance is None:
                    raise TraceSchemaError(
                        f"prefill token {s.token_id} layer {layer}: missing attention importance"
                    )
        if self.prefill:
            ids = [s.token_id for s in self.prefill[0]]
            for layer, row in enumerate(self.prefill):
                if [s.token_id for s in row] != ids:
                    raise TraceSchemaError(f"prefill layer {layer} lists tokens in a different order than layer 0")
        for d, layers in enumerate(self.decode):
            if len(layers) != m.num_layers:
                raise TraceSchemaError(f"decode step {d} has {len(layers)} layers")
            if len({s.token_id for s in layers}) > 1:
                raise TraceSchemaError(f"decode step {d} mixes token ids across layers")
            for layer, s in enumerate(layers):
                check_step(s, m, layer, "decode")


def _check_dist(vec: np.ndarray, m: int, what: str, where: str) -> None:
    if vec.shape != (m,):
        raise TraceSchemaError(f"{where}: {what} has length {vec.shape[0] if vec.ndim else 0}, expected {m}")
    if not np.all(np.isfinite(vec)) or np.any(vec < 0):
        raise TraceSchemaError(f"{where}: {what} has negative or non-finite entries")
    total = float(vec.sum())
    if abs(total - 1.0) > DIST_TOL:
        raise TraceSchemaError(f"{where}: {what} sums to {total!r}, expected 1")


def check_step(s: TokenStep, model: ModelSpec, layer: int, phase: str) -> None:
    where = f"{phase} token {s.token_id} layer {layer}"
    _check_dist(s.gate_scores, model.num_experts, "gate_scores", where)
    last = layer == model.num_layers - 1
    pred = s.predicted_next_gate_scores
    if last and pred is not None:
        raise TraceSchemaError(f"{where}: last layer cannot carry a next-layer prediction")
    if pred is not None:
        _check_dist(pred, model.num_experts, "predicted_next_gate_scores", where)
    if s.attention_importance is not None:
        if not math.isfinite(s.attention_importance) or s.attention_importance < 0:
            raise TraceSchemaError(f"{where}: attention importance must be finite and >= 0")
    if phase == "decode" and s.attention_importance is not None:
        raise TraceSchemaError(f"{where}: decode steps carry no attention importance")


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs for :func:`generate_trace`.

    ``skew_alpha`` is the Zipf exponent of the per-layer expert popularity,
    ``heavy_hitter_fraction`` the share of prompt tokens drawn from the
    high-importance regime and ``predictor_fidelity`` the weight of the true
    next-layer gates in the look-ahead prediction (the rest is noise).
    """

    num_prompt_tokens: int = 64
    num_decode_steps: int = 32
    skew_alpha: float = 1.2
    heavy_hitter_fraction: float = 0.2
    predictor_fidelity: float = 0.8
    rng_seed: int = 0
    concentration: float = 1.0

    def __post_init__(self):
        if int(self.num_prompt_tokens) != self.num_prompt_tokens or self.num_prompt_tokens < 1:
            raise ConfigError("num_prompt_tokens", "must be a positive integer")
        if int(self.num_decode_steps) != self.num_decode_steps or self.num_decode_steps < 0:
            raise ConfigError("num_decode_steps", "must be a non-negative integer")
        if not self.skew_alpha > 0:
            raise ConfigError("skew_alpha", "must be > 0")
        if not 0 < self.heavy_hitter_fraction <= 1:
            raise ConfigError("heavy_hitter_fraction", "must be in (0, 1]")
        if not 0 <= self.predictor_fidelity <= 1:
            raise ConfigError("predictor_fidelity", "must be in [0, 1]")
        if not self.concentration > 0:
            raise ConfigError("concentration", "must be > 0")
        if int(self.rng_seed) != self.rng_seed:
            raise ConfigError("rng_seed", "must be an integer")

    def to_dict(self) -> dict:
        return {
            "num_prompt_tokens": self.num_prompt_tokens,
            "num_decode_steps": self.num_decode_steps,
            "skew_alpha": self.skew_alpha,
            "heavy_hitter_fraction": self.heavy_hitter_fraction,
            "predictor_fidelity": self.predictor_fidelity,
            "rng_seed": self.rng_seed,
            "concentration": self.concentration,
        }


# Mixtral-like expert footprint: 4-bit high tier, 2-bit low tier.
HIGH_EXPERT_BYTES = 88 * 2**20
LOW_EXPERT_BYTES = 44 * 2**20


def default_model_spec(num_layers: int = 16, num_experts: int = 8, routing_topk: int = 2) -> ModelSpec:
    return ModelSpec(
        num_layers=num_layers,
        num_experts=num_experts,
        routing_topk=routing_topk,
        expert_bytes={Precision.HIGH: HIGH_EXPERT_BYTES, Precision.LOW: LOW_EXPERT_BYTES},
        attention_bytes_per_layer=32 * 2**20,
    )


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / v.sum()


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    g = rng.dirichlet(alpha)
    if not np.isfinite(g).all() or g.sum() <= 0:  # all-underflow guard for tiny alphas
        g = alpha.copy()
    # renormalize so the stored vector sums to 1 to within rounding
    return _normalize(g)


def generate_trace(spec: ModelSpec, cfg: SynthesisConfig) -> InferenceTrace:
    """Synthesize a trace with skewed, input-dependent routing.

    Each layer gets a Zipf popularity profile over a random permutation of its
    experts, so which experts are hot differs by layer and by seed. Token
    gates are Dirichlet draws around that profile. Predictions mix the true
    next-layer gates with flat Dirichlet noise at weight ``predictor_fidelity``.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    L, M = spec.num_layers, spec.num_experts
    T, S = cfg.num_prompt_tokens, cfg.num_decode_steps
    rho = float(cfg.predictor_fidelity)

    ranks = np.arange(1, M + 1, dtype=np.float64)
    zipf = ranks ** (-cfg.skew_alpha)
    profiles = np.empty((L, M))
    for layer in range(L):
        perm = rng.permutation(M)
        profiles[layer, perm] = zipf / zipf.sum()
    alphas = profiles * (cfg.concentration * M)

    n_tokens = T + S
    gates = np.empty((n_tokens, L, M))
    for i in range(n_tokens):
        for layer in range(L):
            gates[i, layer] = _dirichlet(rng, alphas[layer])

    flat = np.ones(M)
    preds = np.empty((n_tokens, max(L - 1, 0), M))
    for i in range(n_tokens):
        for layer in range(L - 1):
            noise = _dirichlet(rng, flat)
            if rho == 1.0:
                preds[i, layer] = gates[i, layer + 1]
            else:
                preds[i, layer] = _normalize(rho * gates[i, layer + 1] + (1.0 - rho) * noise)

    n_heavy = max(1, round(cfg.heavy_hitter_fraction * T))
    heavy = rng.choice(T, size=n_heavy, replace=False)
    s = rng.uniform(0.0, 0.1, size=T)
    s[heavy] = rng.uniform(0.5, 1.0, size=n_heavy)

    def step(i: int, layer: int, importance):
        pred = preds[i, layer] if layer < L - 1 else None
        return TokenStep(i, gates[i, layer], pred, importance)

    prefill = [[step(i, layer, s[i]) for i in range(T)] for layer in range(L)]
    decode = [[step(T + d, layer, None) for layer in range(L)] for d in range(S)]
    meta = {"generator": "moesim.synthetic", "synthesis": cfg.to_dict()}
    return InferenceTrace(spec, prefill, decode, meta)


def mean_topk_overlap(trace: InferenceTrace, k: Optional[int] = None) -> float:
    """Mean |top-k(prediction) ∩ top-k(next-layer gates)| over all tokens and layers."""
    from .kernels import topk_overlap

    k = trace.model.routing_topk if k is None else k
    L = trace.model.num_layers
    pred_rows, true_rows = [], []
    for layer in range(L - 1):
        for a, b in zip(trace.prefill[layer], trace.prefill[layer + 1]):
            pred_rows.append(a.predicted_next_gate_scores)
            true_rows.append(b.gate_scores)
    for layers in trace.decode:
        for layer in range(L - 1):
            pred_rows.append(layers[layer].predicted_next_gate_scores)
            true_rows.append(layers[layer + 1].gate_scores)
    if not pred_rows:
        return 0.0
    return float(topk_overlap(np.stack(pred_rows), np.stack(true_rows), k).mean())
