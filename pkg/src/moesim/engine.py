"""Discrete-event replay of a trace under an offloading policy.

The device runs one compute stream (attention, then the layer's experts)
and a single host-to-device link carries expert weights. Transfers and
compute overlap in simulated time; whenever the compute stream has experts
left in the current layer but none of them is resident, the gap is logged
as a stall.

Link arbitration: one transfer at a time, demand misses ahead of queued
prefetches, no preemption of the transfer in flight.
"""

from __future__ import annotations

import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .cache import ExpertCache, ExpertKey
from .errors import CapacityError, ConfigError
from .importance import HeavyHitterConfig, ImportanceScores, Phase, default_k_tokens, select_heavy_hitters
from .kernels import route_counts, topk_indices, topk_rows
from .prefetcher import PrefetchConfig, PrefetchRequest, decode_prefetch, requests_from_counts
from .scheduler import (
    PolicyConfig,
    assign_decode_precisions,
    assign_precisions,
    uniform_assignment,
)
from .traces import InferenceTrace, Precision


class Policy(str, enum.Enum):
    LOAD_ON_DEMAND = "load_on_demand"
    CACHE = "cache"
    CACHE_PREFETCH = "cache_prefetch"
    CACHE_DYQUANT_42 = "cache_dyquant_4_2"
    CACHE_DYQUANT_40 = "cache_dyquant_4_0"
    CACHE_DYQUANT_PREFETCH_42 = "cache_dyquant_4_2_prefetch"
    CACHE_DYQUANT_PREFETCH_40 = "cache_dyquant_4_0_prefetch"

    @property
    def uses_cache(self) -> bool:
        return self is not Policy.LOAD_ON_DEMAND

    @property
    def uses_prefetch(self) -> bool:
        return self in (Policy.CACHE_PREFETCH, Policy.CACHE_DYQUANT_PREFETCH_42, Policy.CACHE_DYQUANT_PREFETCH_40)

    @property
    def low_tier(self) -> Optional[Precision]:
        if self in (Policy.CACHE_DYQUANT_42, Policy.CACHE_DYQUANT_PREFETCH_42):
            return Precision.LOW
        if self in (Policy.CACHE_DYQUANT_40, Policy.CACHE_DYQUANT_PREFETCH_40):
            return Precision.SKIP
        return None


# The incremental ladder of the ablation study, in order.
ABLATION_LADDER = (
    Policy.LOAD_ON_DEMAND,
    Policy.CACHE,
    Policy.CACHE_PREFETCH,
    Policy.CACHE_DYQUANT_42,
    Policy.CACHE_DYQUANT_PREFETCH_42,
    Policy.CACHE_DYQUANT_PREFETCH_40,
)


def _per_precision(d: Mapping, name: str) -> Dict[Precision, float]:
    out = {Precision(k): float(v) for k, v in dict(d).items()}
    missing = {Precision.HIGH, Precision.LOW} - set(out)
    if missing:
        raise ConfigError(name, f"missing entries for {sorted(p.value for p in missing)}")
    return out


@dataclass(frozen=True)
class HardwareSpec:
    """Device and link cost model. Times in seconds, sizes in bytes.

    Expert compute times are per invocation: one token in decode, the whole
    routed token batch in prefill.
    """

    link_bandwidth: float
    link_latency: float
    attention_time_prefill: float
    attention_time_decode: float
    expert_compute_prefill: Mapping[Precision, float]
    expert_compute_decode: Mapping[Precision, float]
    vram_budget: float
    resident_reservation: float = 0.0
    dequant_time: Mapping[Precision, float] = field(
        default_factory=lambda: {Precision.HIGH: 0.0, Precision.LOW: 0.0}
    )

    def __post_init__(self):
        for name in ("expert_compute_prefill", "expert_compute_decode", "dequant_time"):
            object.__setattr__(self, name, _per_precision(getattr(self, name), name))
        for name in ("link_bandwidth", "attention_time_prefill", "attention_time_decode", "vram_budget"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if self.link_latency < 0:
            raise ConfigError("link_latency", "must be >= 0")
        if self.resident_reservation < 0:
            raise ConfigError("resident_reservation", "must be >= 0")
        if not self.vram_budget > self.resident_reservation:
            raise ConfigError("vram_budget", "must exceed resident_reservation")
        for name in ("expert_compute_prefill", "expert_compute_decode"):
            if any(v <= 0 for v in getattr(self, name).values()):
                raise ConfigError(name, "must be > 0")
        if any(v < 0 for v in self.dequant_time.values()):
            raise ConfigError("dequant_time", "must be >= 0")

    @property
    def expert_capacity(self) -> float:
        return self.vram_budget - self.resident_reservation

    def transfer_time(self, nbytes: float) -> float:
        return self.link_latency + nbytes / self.link_bandwidth

    def compute_time(self, phase: Phase, precision: Precision) -> float:
        table = self.expert_compute_prefill if phase is Phase.PREFILL else self.expert_compute_decode
        return table[precision] + self.dequant_time[precision]

    def attention_time(self, phase: Phase) -> float:
        return self.attention_time_prefill if phase is Phase.PREFILL else self.attention_time_decode

    def with_capacity(self, capacity_bytes: float) -> "HardwareSpec":
        return replace(self, vram_budget=self.resident_reservation + capacity_bytes)

    def to_dict(self) -> dict:
        def pp(d):
            return {p.value: v for p, v in d.items()}

        return {
            "link_bandwidth": self.link_bandwidth,
            "link_latency": self.link_latency,
            "attention_time_prefill": self.attention_time_prefill,
            "attention_time_decode": self.attention_time_decode,
            "expert_compute_prefill": pp(self.expert_compute_prefill),
            "expert_compute_decode": pp(self.expert_compute_decode),
            "vram_budget": self.vram_budget,
            "resident_reservation": self.resident_reservation,
            "dequant_time": pp(self.dequant_time),
        }


def default_hardware(spec, capacity_fraction: float = 0.4) -> HardwareSpec:
    """An edge GPU on PCIe 4.0 with room for ``capacity_fraction`` of the HIGH experts."""
    reservation = spec.num_layers * spec.attention_bytes_per_layer
    capacity = capacity_fraction * spec.total_expert_bytes_high
    return HardwareSpec(
        link_bandwidth=20e9,
        link_latency=50e-6,
        attention_time_prefill=4e-3,
        attention_time_decode=0.7e-3,
        expert_compute_prefill={Precision.HIGH: 2.0e-3, Precision.LOW: 1.6e-3},
        expert_compute_decode={Precision.HIGH: 0.35e-3, Precision.LOW: 0.3e-3},
        vram_budget=reservation + capacity,
        resident_reservation=reservation,
    )


@dataclass(frozen=True)
class SimConfig:
    policy: Policy
    lam: float = 0.5
    heavy_hitter: Optional[HeavyHitterConfig] = None  # None: ceil(0.2 * prompt length)
    prefetch: PrefetchConfig = PrefetchConfig()
    renormalize_on_skip: bool = True
    low_discount: float = 0.5
    warm_start: bool = True
    name: Optional[str] = None
    rng_seed: int = 0  # reserved; the engine is deterministic

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", "must be in [0, 1]")
        if not 0.0 <= self.low_discount <= 1.0:
            raise ConfigError("low_discount", "must be in [0, 1]")

    @property
    def label(self) -> str:
        return self.name or self.policy.value

    @property
    def policy_config(self) -> Optional[PolicyConfig]:
        tier = self.policy.low_tier
        return None if tier is None else PolicyConfig(self.lam, tier)


class EventKind(str, enum.Enum):
    ATTENTION = "attention"
    EXPERT = "expert"
    TRANSFER = "transfer"
    STALL = "stall"


class Event(NamedTuple):
    start: float
    end: float
    kind: EventKind
    phase: str
    step: int
    layer: int
    expert: int = -1
    precision: str = ""
    tag: str = ""  # transfers: "demand" or "prefetch"


_KIND_ORDER = {EventKind.TRANSFER: 0, EventKind.ATTENTION: 1, EventKind.STALL: 2, EventKind.EXPERT: 3}


@dataclass
class Timeline:
    events: List[Event]

    def of_kind(self, kind: EventKind) -> List[Event]:
        return [e for e in self.events if e.kind is kind]

    def total(self, kind: EventKind, phase: Optional[str] = None) -> float:
        return float(sum((e.end - e.start for e in self.events if e.kind is kind and (phase is None or e.phase == phase)), 0.0))


@dataclass(frozen=True)
class Metrics:
    ttft: float
    tpot: float
    prefetch_hit_rate: float
    cache_hit_rate: float
    bytes_transferred: int
    retained_gate_mass: float
    stall_time: float
    decode_stall_time: float
    num_transfers: int
    prefetch_issued: int
    prefetch_useful: int
    demand_lookups: int
    cache_hits: int

    FIELDS = (
        "ttft",
        "tpot",
        "prefetch_hit_rate",
        "cache_hit_rate",
        "bytes_transferred",
        "retained_gate_mass",
        "stall_time",
        "decode_stall_time",
        "num_transfers",
        "prefetch_issued",
        "prefetch_useful",
        "demand_lookups",
        "cache_hits",
    )

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


# ---------------------------------------------------------------------------
# Planning: which experts each layer executes, at what precision, and what it
# prefetches for the next layer. Depends only on the trace and the policy.


class Unit(NamedTuple):
    phase: Phase
    step: int
    layer: int


@dataclass
class UnitPlan:
    unit: Unit
    demand: List[Tuple[int, Precision]]
    prefetch: List[PrefetchRequest]


def _heavy_rows(trace: InferenceTrace, layer: int, cfg: SimConfig) -> np.ndarray:
    steps = trace.prefill[layer]
    k = cfg.heavy_hitter.k_tokens if cfg.heavy_hitter else default_k_tokens(len(steps))
    heavy = select_heavy_hitters(steps, HeavyHitterConfig(k))
    return np.array([i for i, s in enumerate(steps) if s.token_id in heavy], dtype=np.int64)


def plan_prefill_layer(trace: InferenceTrace, layer: int, cfg: SimConfig) -> UnitPlan:
    spec = trace.model
    k, m = spec.routing_topk, spec.num_experts
    policy = cfg.policy_config
    gates = trace.prefill_gates(layer)
    used = np.unique(topk_rows(gates, k))
    if policy is None:
        assignment = uniform_assignment(layer, m)
        heavy_rows = None
    else:
        heavy_rows = _heavy_rows(trace, layer, cfg)
        scores = ImportanceScores(layer, Phase.PREFILL, route_counts(gates, k, heavy_rows))
        assignment = assign_precisions(scores, layer, spec, policy)
    demand = [(int(e), assignment[e]) for e in used if assignment[e] is not Precision.SKIP]

    prefetch: List[PrefetchRequest] = []
    preds = trace.prefill_predictions(layer) if cfg.policy.uses_prefetch else None
    if preds is not None and layer + 1 < spec.num_layers:
        if policy is None:
            nxt = uniform_assignment(layer + 1, m)
        else:
            pscores = ImportanceScores(layer + 1, Phase.PREFILL, route_counts(preds, k, heavy_rows))
            nxt = assign_precisions(pscores, layer + 1, spec, policy)
        t = cfg.prefetch.resolve(m, nxt.num_high)
        prefetch = requests_from_counts(route_counts(preds, k), t, layer + 1, nxt)
    return UnitPlan(Unit(Phase.PREFILL, 0, layer), demand, prefetch)


def plan_decode_layer(trace: InferenceTrace, step: int, layer: int, cfg: SimConfig) -> UnitPlan:
    spec = trace.model
    k, m = spec.routing_topk, spec.num_experts
    policy = cfg.policy_config
    tok = trace.decode[step][layer]
    routed = sorted(int(e) for e in topk_indices(tok.gate_scores, k))
    if policy is None:
        demand = [(e, Precision.HIGH) for e in routed]
    else:
        a = assign_decode_precisions(tok.gate_scores, layer, spec, policy)
        demand = [(e, a[e]) for e in routed if a[e] is not Precision.SKIP]

    prefetch: List[PrefetchRequest] = []
    pred = tok.predicted_next_gate_scores
    if cfg.policy.uses_prefetch and pred is not None and layer + 1 < spec.num_layers:
        if policy is None:
            nxt, default_t = None, k
        else:
            nxt = assign_decode_precisions(pred, layer + 1, spec, policy)
            default_t = nxt.num_high
        t = cfg.prefetch.resolve(m, default_t)
        prefetch = decode_prefetch(tok, PrefetchConfig(t), layer + 1, nxt)
    return UnitPlan(Unit(Phase.DECODE, step, layer), demand, prefetch)


def plan_trace(trace: InferenceTrace, cfg: SimConfig) -> List[UnitPlan]:
    L = trace.model.num_layers
    plans = []
    if trace.num_prompt_tokens:
        plans.extend(plan_prefill_layer(trace, layer, cfg) for layer in range(L))
    for d in range(trace.num_decode_steps):
        plans.extend(plan_decode_layer(trace, d, layer, cfg) for layer in range(L))
    return plans


def quality_proxy(trace: InferenceTrace, cfg: SimConfig) -> float:
    """Mean share of routed gate mass executed at high precision over decode tokens.

    LOW-executed experts count with weight ``cfg.low_discount``, skipped ones
    with zero. Computed on the raw gate scores.
    """
    policy = cfg.policy_config
    if policy is None or not trace.decode:
        return 1.0
    weight = {Precision.HIGH: 1.0, Precision.LOW: cfg.low_discount, Precision.SKIP: 0.0}
    spec = trace.model
    vals = []
    for layers in trace.decode:
        for layer, tok in enumerate(layers):
            a = assign_decode_precisions(tok.gate_scores, layer, spec, policy)
            routed = topk_indices(tok.gate_scores, spec.routing_topk)
            g = tok.gate_scores[routed]
            w = np.array([weight[a[e]] for e in routed])
            vals.append(float(np.sum(g * w)) / float(np.sum(g)))
    return float(sum(vals) / len(vals))


# ---------------------------------------------------------------------------
# Event loop


_P_XFER, _P_COMPUTE, _P_ATTN, _P_UNIT = 0, 1, 2, 3

_DEMAND, _PREFETCH = "demand", "prefetch"


@dataclass(eq=False)
class _Transfer:
    key: ExpertKey
    precision: Precision
    nbytes: int
    klass: str
    origin: str
    phase: str
    step: int
    target: int = -1  # unit index a prefetch was issued for
    start: float = math.nan
    waiters: list = field(default_factory=list)
    counted_useful: bool = False


@dataclass(eq=False)
class _Job:
    expert: int
    key: ExpertKey
    precision: Optional[Precision] = None  # precision it executes at, once resident
    ready: bool = False
    started: bool = False
    pinned: bool = False


class _Simulator:
    def __init__(self, trace: InferenceTrace, hw: HardwareSpec, cfg: SimConfig):
        self.trace, self.hw, self.cfg = trace, hw, cfg
        self.spec = trace.model
        self.plans = plan_trace(trace, cfg)
        capacity = hw.expert_capacity if cfg.policy.uses_cache else 0.0
        self.cache = ExpertCache(capacity, self.spec.expert_bytes)
        self.events: List[Event] = []
        self.heap: list = []
        self.seq = 0
        self.demand_q: deque = deque()
        self.prefetch_q: deque = deque()
        self.link_busy: Optional[_Transfer] = None
        self.inflight: Dict[ExpertKey, List[_Transfer]] = {}
        self.prefetched: Dict[ExpertKey, int] = {}  # prefetched key -> target unit, not yet demanded
        self.jobs: List[_Job] = []
        self.unit_idx = -1
        self.compute_busy = False
        self.stall_start: Optional[float] = None
        self.ttft = 0.0
        self.step_bounds: Dict[int, List[float]] = {}
        self.bytes = 0
        self.n_transfers = 0
        self.lookups = 0
        self.hits = 0
        self.pf_issued = 0
        self.pf_useful = 0

    # -- plumbing ---------------------------------------------------------

    def push(self, t: float, prio: int, fn, *args) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, prio, self.seq, fn, args))

    def emit(self, *args, **kw) -> None:
        self.events.append(Event(*args, **kw))

    # -- warm start -------------------------------------------------------

    def warm(self) -> None:
        size = self.spec.expert_bytes[Precision.HIGH]
        for e in range(self.spec.num_experts):
            for layer in range(self.spec.num_layers):
                if self.cache.used + size > self.cache.capacity:
                    return
                self.cache.insert((layer, e), Precision.HIGH, now=-1.0)

    # -- link -------------------------------------------------------------

    def enqueue(self, tr: _Transfer) -> None:
        self.inflight.setdefault(tr.key, []).append(tr)
        (self.demand_q if tr.klass == _DEMAND else self.prefetch_q).append(tr)

    def kick_link(self, t: float) -> None:
        if self.link_busy is not None:
            return
        q = self.demand_q if self.demand_q else self.prefetch_q
        if not q:
            return
        tr = q.popleft()
        tr.start = t
        self.link_busy = tr
        self.push(t + self.hw.transfer_time(tr.nbytes), _P_XFER, self.on_transfer_done, tr)

    def on_transfer_done(self, t: float, tr: _Transfer) -> None:
        self.link_busy = None
        self.emit(tr.start, t, EventKind.TRANSFER, tr.phase, tr.step, tr.key.layer, tr.key.expert,
                  tr.precision.value, tr.origin)
        self.bytes += tr.nbytes
        self.n_transfers += 1
        self.inflight[tr.key].remove(tr)
        if not self.inflight[tr.key]:
            del self.inflight[tr.key]
        inserted = False
        held = self.cache.cached_precision(tr.key)
        if held is not None and held is not tr.precision and held.satisfies(tr.precision):
            pass  # a better copy arrived first; keep it
        else:
            try:
                for k in self.cache.insert(tr.key, tr.precision, now=t):
                    if k != tr.key:
                        self.prefetched.pop(k, None)
                inserted = True
            except CapacityError:
                pass  # bypass: weights are used once straight from the transfer
        if tr.waiters:
            for job in tr.waiters:
                job.ready = True
                job.precision = tr.precision
                if inserted:
                    self.cache.pin(tr.key)
                    job.pinned = True
            self.prefetched.pop(tr.key, None)
        elif inserted and tr.klass == _PREFETCH:
            self.prefetched[tr.key] = tr.target
        self.kick_link(t)
        self.kick_compute(t)

    # -- compute stream ---------------------------------------------------

    def start_unit(self, t: float) -> None:
        self.unit_idx += 1
        if self.unit_idx >= len(self.plans):
            return
        u = self.plans[self.unit_idx].unit
        if u.phase is Phase.DECODE and u.layer == 0:
            self.step_bounds[u.step] = [t, math.nan]
        dur = self.hw.attention_time(u.phase)
        self.compute_busy = True
        self.emit(t, t + dur, EventKind.ATTENTION, u.phase.value, u.step, u.layer)
        self.push(t + dur, _P_ATTN, self.on_attention_done)

    def on_attention_done(self, t: float) -> None:
        self.compute_busy = False
        plan = self.plans[self.unit_idx]
        u = plan.unit
        self.jobs = []
        for e, prec in plan.demand:
            key = ExpertKey(u.layer, e)
            job = _Job(e, key)
            self.jobs.append(job)
            self.lookups += 1
            outcome = self.cache.lookup(key, prec, now=t)
            if outcome.is_hit:
                self.hits += 1
                self.cache.pin(key)
                job.ready, job.pinned, job.precision = True, True, outcome.precision
                if self.prefetched.pop(key, None) == self.unit_idx:
                    self.pf_useful += 1
                continue
            pending = [tr for tr in self.inflight.get(key, ()) if tr.precision.satisfies(prec)]
            if pending:
                tr = pending[0]
                tr.waiters.append(job)
                if tr.origin == _PREFETCH and tr.target == self.unit_idx and not tr.counted_useful:
                    tr.counted_useful = True
                    self.pf_useful += 1
                if tr.klass == _PREFETCH and tr in self.prefetch_q:
                    self.prefetch_q.remove(tr)
                    tr.klass = _DEMAND
                    self.demand_q.append(tr)
                continue
            # a queued lower-precision prefetch for this key is now useless
            for tr in list(self.inflight.get(key, ())):
                if tr in self.prefetch_q:
                    self.prefetch_q.remove(tr)
                    self.inflight[key].remove(tr)
            if key in self.inflight and not self.inflight[key]:
                del self.inflight[key]
            tr = _Transfer(key, outcome.precision, self.spec.bytes_for(outcome.precision), _DEMAND,
                           _DEMAND, u.phase.value, u.step)
            tr.waiters.append(job)
            self.enqueue(tr)
        for req in plan.prefetch:
            key = ExpertKey(req.layer, req.expert)
            held = self.cache.cached_precision(key)
            if held is not None and held.satisfies(req.precision):
                continue
            if any(tr.precision.satisfies(req.precision) for tr in self.inflight.get(key, ())):
                continue
            self.pf_issued += 1
            self.enqueue(_Transfer(key, req.precision, self.spec.bytes_for(req.precision), _PREFETCH,
                                   _PREFETCH, u.phase.value, u.step, target=self.unit_idx + 1))
        self.kick_link(t)
        self.kick_compute(t)

    def kick_compute(self, t: float) -> None:
        if self.compute_busy or not 0 <= self.unit_idx < len(self.plans):
            return
        waiting = [j for j in self.jobs if not j.started]
        if not waiting:
            self.finish_unit(t)
            return
        ready = [j for j in waiting if j.ready]
        if not ready:
            if self.stall_start is None:
                self.stall_start = t
            return
        u = self.plans[self.unit_idx].unit
        if self.stall_start is not None:
            if t > self.stall_start:
                self.emit(self.stall_start, t, EventKind.STALL, u.phase.value, u.step, u.layer)
            self.stall_start = None
        job = ready[0]
        job.started = True
        self.compute_busy = True
        dur = self.hw.compute_time(u.phase, job.precision)
        self.emit(t, t + dur, EventKind.EXPERT, u.phase.value, u.step, u.layer, job.expert, job.precision.value)
        self.push(t + dur, _P_COMPUTE, self.on_compute_done, job)

    def on_compute_done(self, t: float, job: _Job) -> None:
        self.compute_busy = False
        if job.pinned:
            self.cache.unpin(job.key)
            job.pinned = False
        self.kick_compute(t)

    def finish_unit(self, t: float) -> None:
        u = self.plans[self.unit_idx].unit
        self.jobs = []
        if u.phase is Phase.PREFILL:
            self.ttft = t
        elif u.layer == self.spec.num_layers - 1:
            self.step_bounds[u.step][1] = t
        self.compute_busy = True  # held until the next unit starts
        self.push(t, _P_UNIT, self._next_unit)

    def _next_unit(self, t: float) -> None:
        self.compute_busy = False
        self.start_unit(t)

    # -- driver -----------------------------------------------------------

    def run(self) -> Tuple[Timeline, Metrics]:
        if self.cfg.warm_start and self.cfg.policy.uses_cache:
            self.warm()
        self.push(0.0, _P_UNIT, self._next_unit)
        while self.heap:
            t, _, _, fn, args = heapq.heappop(self.heap)
            fn(t, *args)
        events = sorted(
            self.events, key=lambda e: (e.start, _KIND_ORDER[e.kind], e.end, e.layer, e.expert)
        )
        timeline = Timeline(events)
        spans = [b - a for a, b in (self.step_bounds[d] for d in sorted(self.step_bounds))]
        tpot = float(sum(spans) / len(spans)) if spans else 0.0
        metrics = Metrics(
            ttft=self.ttft,
            tpot=tpot,
            prefetch_hit_rate=self.pf_useful / self.pf_issued if self.pf_issued else 0.0,
            cache_hit_rate=self.hits / self.lookups if self.lookups and self.cfg.policy.uses_cache else 0.0,
            bytes_transferred=int(self.bytes),
            retained_gate_mass=quality_proxy(self.trace, self.cfg),
            stall_time=timeline.total(EventKind.STALL),
            decode_stall_time=timeline.total(EventKind.STALL, Phase.DECODE.value),
            num_transfers=self.n_transfers,
            prefetch_issued=self.pf_issued,
            prefetch_useful=self.pf_useful,
            demand_lookups=self.lookups,
            cache_hits=self.hits,
        )
        return timeline, metrics


def _check_consistent(trace: InferenceTrace, cfg: SimConfig) -> None:
    spec = trace.model
    if len(trace.prefill) != spec.num_layers:
        raise ConfigError("trace.prefill", f"{len(trace.prefill)} layers, model declares {spec.num_layers}")
    for d, layers in enumerate(trace.decode):
        if len(layers) != spec.num_layers:
            raise ConfigError("trace.decode", f"step {d} has {len(layers)} layers, model declares {spec.num_layers}")
    for row in trace.prefill:
        for s in row:
            if s.gate_scores.shape != (spec.num_experts,):
                raise ConfigError("trace.gate_scores", f"length {s.gate_scores.shape[0]}, model declares {spec.num_experts}")
    if cfg.prefetch.t_prefetch is not None and cfg.prefetch.t_prefetch > spec.num_experts:
        raise ConfigError("t_prefetch", f"exceeds the {spec.num_experts} experts per layer")
    if cfg.heavy_hitter is not None and trace.num_prompt_tokens and cfg.heavy_hitter.k_tokens > trace.num_prompt_tokens:
        raise ConfigError("k_tokens", f"exceeds the {trace.num_prompt_tokens} prompt tokens")


def simulate(trace: InferenceTrace, hw: HardwareSpec, cfg: SimConfig) -> Tuple[Timeline, Metrics]:
    """Replay ``trace`` on ``hw`` under ``cfg``; deterministic."""
    _check_consistent(trace, cfg)
    return _Simulator(trace, hw, cfg).run()


@dataclass
class AblationRow:
    config: SimConfig
    metrics: Metrics
    ttft_speedup: float
    tpot_speedup: float

    def record(self) -> dict:
        rec = {"config": self.config.label, "policy": self.config.policy.value, "lambda": self.config.lam}
        rec.update(self.metrics.as_dict())
        rec["ttft_speedup"] = self.ttft_speedup
        rec["tpot_speedup"] = self.tpot_speedup
        return rec


@dataclass
class AblationReport:
    rows: List[AblationRow]
    timelines: List[Timeline]

    def records(self) -> List[dict]:
        return [r.record() for r in self.rows]


def _ratio(base: float, x: float) -> float:
    return base / x if x > 0 else (1.0 if base == x else math.inf)


def run_ablation(trace: InferenceTrace, hw: HardwareSpec, ladder: Sequence[SimConfig]) -> AblationReport:
    """Simulate each config in order; speedups are relative to the first."""
    if not ladder:
        raise ConfigError("ladder", "needs at least one config")
    results = [simulate(trace, hw, cfg) for cfg in ladder]
    base = results[0][1]
    rows = [
        AblationRow(cfg, m, _ratio(base.ttft, m.ttft), _ratio(base.tpot, m.tpot))
        for cfg, (_, m) in zip(ladder, results)
    ]
    return AblationReport(rows, [tl for tl, _ in results])


def ablation_ladder(lam: float = 0.5, **kw) -> List[SimConfig]:
    return [SimConfig(p, lam=lam, **kw) for p in ABLATION_LADDER]
