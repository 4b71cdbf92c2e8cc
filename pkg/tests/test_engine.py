import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesim import (
    ABLATION_LADDER,
    HardwareSpec,
    InferenceTrace,
    ModelSpec,
    Precision,
    PrefetchConfig,
    SimConfig,
    SynthesisConfig,
    TokenStep,
    ablation_ladder,
    default_hardware,
    default_model_spec,
    generate_trace,
    quality_proxy,
    run_ablation,
    simulate,
)
from moesim.engine import EventKind, Policy, plan_trace
from moesim.errors import ConfigError
from moesim.importance import Phase

from oracles import reference_run, top_k_sorted

H, LO = Precision.HIGH, Precision.LOW
MB = 2**20


def _hw(**kw):
    base = dict(
        link_bandwidth=1e9,
        link_latency=1e-4,
        attention_time_prefill=1e-3,
        attention_time_decode=1e-3,
        expert_compute_prefill={H: 2e-3, LO: 1e-3},
        expert_compute_decode={H: 2e-3, LO: 1e-3},
        vram_budget=1000 * MB,
        resident_reservation=0,
    )
    base.update(kw)
    return HardwareSpec(**base)


def _spec(L, M, k):
    return ModelSpec(L, M, k, {H: 10 * MB, LO: 5 * MB})


def _onehot(m, *idx_weights):
    g = np.zeros(m)
    for i, w in idx_weights:
        g[i] = w
    return g


def _decode_trace(spec, gates, preds=None):
    """One decode step; ``gates[l]`` the layer-l gate vector, no prefill."""
    L = spec.num_layers
    layers = []
    for l in range(L):
        p = None if l == L - 1 else (preds[l] if preds is not None else gates[l + 1])
        layers.append(TokenStep(0, gates[l], p))
    return InferenceTrace(spec, [[] for _ in range(L)], [layers])


# -- hand examples -------------------------------------------------------------


def test_single_miss_is_serial_sum():
    spec = _spec(1, 4, 1)
    hw = _hw()
    tr = _decode_trace(spec, [_onehot(4, (2, 1.0))])
    tl, m = simulate(tr, hw, SimConfig(Policy.LOAD_ON_DEMAND))
    expect = hw.attention_time_decode + hw.link_latency + 10 * MB / hw.link_bandwidth + 2e-3
    assert m.tpot == pytest.approx(expect, rel=1e-12)
    assert m.ttft == 0.0
    assert m.bytes_transferred == 10 * MB
    assert m.stall_time == pytest.approx(hw.link_latency + 10 * MB / hw.link_bandwidth)


def test_cached_expert_removes_transfer():
    spec = _spec(1, 4, 1)
    hw = _hw()
    tr = _decode_trace(spec, [_onehot(4, (2, 1.0))])
    # the warm start fills all four experts into the 1000 MB cache
    tl, m = simulate(tr, hw, SimConfig(Policy.CACHE))
    assert m.tpot == pytest.approx(hw.attention_time_decode + 2e-3, rel=1e-12)
    assert m.bytes_transferred == 0 and not tl.of_kind(EventKind.STALL)


def test_prefetch_with_perfect_prediction_hides_transfer():
    spec = _spec(2, 4, 1)
    tt = 1e-4 + 10 * MB / 1e9
    hw = _hw(expert_compute_decode={H: tt, LO: tt / 2})  # layer-0 compute >= transfer time
    tr = _decode_trace(spec, [_onehot(4, (0, 1.0)), _onehot(4, (2, 1.0))])
    tl, m = simulate(tr, hw, SimConfig(Policy.CACHE_PREFETCH, warm_start=False))
    layer1 = [e for e in tl.events if e.layer == 1 and e.kind in (EventKind.ATTENTION, EventKind.EXPERT, EventKind.STALL)]
    assert not [e for e in layer1 if e.kind is EventKind.STALL]
    span = max(e.end for e in layer1) - min(e.start for e in layer1)
    assert span == pytest.approx(hw.attention_time_decode + tt, rel=1e-12)
    pf = [e for e in tl.of_kind(EventKind.TRANSFER) if e.tag == "prefetch"]
    assert [(e.layer, e.expert) for e in pf] == [(1, 2)]
    assert m.prefetch_hit_rate == 1.0


# -- the straight-line oracle ---------------------------------------------------


def _engine_tuples(tl):
    return [(e.start, e.end, e.kind.value, e.phase, e.step, e.layer, e.expert, e.precision, e.tag) for e in tl.events]


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("frac", [0.0, 0.15, 0.4, 1.0])
def test_matches_reference_interpreter(seed, frac):
    spec = default_model_spec(8, 8, 2)
    tr = generate_trace(spec, SynthesisConfig(rng_seed=seed, num_prompt_tokens=16, num_decode_steps=10))
    hw = default_hardware(spec, frac) if frac > 0 else default_hardware(spec).with_capacity(1.0)
    for policy, use_cache in ((Policy.LOAD_ON_DEMAND, False), (Policy.CACHE, True)):
        for warm in (True, False):
            tl, m = simulate(tr, hw, SimConfig(policy, warm_start=warm))
            ref = reference_run(tr, hw, use_cache, warm_start=warm)
            assert _engine_tuples(tl) == ref.events
            assert m.ttft == ref.ttft and m.tpot == ref.tpot
            assert m.bytes_transferred == ref.bytes_transferred
            assert m.demand_lookups == ref.lookups and m.cache_hits == ref.hits


def test_cache_beats_load_on_demand_with_reuse():
    spec = default_model_spec(8, 8, 2)
    tr = generate_trace(spec, SynthesisConfig(skew_alpha=1.5, num_prompt_tokens=16, num_decode_steps=10))
    hw = default_hardware(spec)
    lod = simulate(tr, hw, SimConfig(Policy.LOAD_ON_DEMAND))[1]
    cache = simulate(tr, hw, SimConfig(Policy.CACHE))[1]
    assert cache.tpot < lod.tpot
    assert reference_run(tr, hw, True).tpot < reference_run(tr, hw, False).tpot


# -- invariants ------------------------------------------------------------------


def _check_invariants(tr, hw, cfg, tl, m):
    ev = tl.events
    assert all(0 <= e.start <= e.end for e in ev)
    stream = sorted((e for e in ev if e.kind is not EventKind.TRANSFER), key=lambda e: (e.start, e.end))
    # the compute stream tiles time: no overlaps, and every gap is a stall event
    for a, b in zip(stream, stream[1:]):
        assert b.start == a.end, (a, b)
    link = sorted(tl.of_kind(EventKind.TRANSFER), key=lambda e: e.start)
    for a, b in zip(link, link[1:]):
        assert b.start >= a.end
    # work conservation
    assert sum(tr.model.bytes_for(Precision(e.precision)) for e in link) == m.bytes_transferred
    assert len(link) == m.num_transfers
    plans = plan_trace(tr, cfg)
    expected = sorted((p.unit.phase.value, p.unit.step, p.unit.layer, e, prec.value) for p in plans for e, prec in p.demand)
    got = sorted((e.phase, e.step, e.layer, e.expert, e.precision) for e in tl.of_kind(EventKind.EXPERT))
    got_keys = [g[:4] for g in got]
    assert got_keys == [x[:4] for x in expected]
    for g, x in zip(got, expected):
        assert Precision(g[4]).satisfies(Precision(x[4]))  # served at requested or better
    # every routed, non-skipped expert, and nothing skipped
    for p in plans:
        if p.unit.phase is Phase.DECODE:
            routed = set(top_k_sorted(tr.decode[p.unit.step][p.unit.layer].gate_scores, tr.model.routing_topk))
            assert {e for e, _ in p.demand} <= routed
            if cfg.policy.low_tier is not Precision.SKIP:
                assert {e for e, _ in p.demand} == routed
    # rates and sign conventions
    for r in (m.prefetch_hit_rate, m.cache_hit_rate, m.retained_gate_mass):
        assert 0.0 <= r <= 1.0
    assert m.ttft > 0 and m.tpot > 0
    assert m.stall_time == pytest.approx(tl.total(EventKind.STALL))


def _check_overlap_soundness(tl):
    """With a cold cache every executed expert needs a landed transfer first."""
    landed = {}
    for e in tl.of_kind(EventKind.TRANSFER):
        landed.setdefault((e.layer, e.expert), []).append((e.end, Precision(e.precision)))
    for e in tl.of_kind(EventKind.EXPERT):
        ok = [t for t, p in landed.get((e.layer, e.expert), []) if t <= e.start and p.satisfies(Precision(e.precision))]
        assert ok, e


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    L=st.integers(1, 6),
    M=st.integers(2, 10),
    frac=st.sampled_from([0.05, 0.2, 0.5, 1.0]),
    policy=st.sampled_from(list(Policy)),
    lam=st.floats(0, 1),
    rho=st.sampled_from([0.0, 0.6, 1.0]),
    warm=st.booleans(),
)
def test_engine_invariants(seed, L, M, frac, policy, lam, rho, warm):
    spec = default_model_spec(L, M, min(2, M))
    tr = generate_trace(spec, SynthesisConfig(rng_seed=seed, num_prompt_tokens=6, num_decode_steps=3, predictor_fidelity=rho))
    hw = default_hardware(spec, frac)
    cfg = SimConfig(policy, lam=lam, warm_start=warm)
    tl, m = simulate(tr, hw, cfg)
    _check_invariants(tr, hw, cfg, tl, m)
    if not warm or not policy.uses_cache:
        _check_overlap_soundness(tl)
    tl2, m2 = simulate(tr, hw, cfg)
    assert tl2.events == tl.events and m2 == m


def test_stall_only_where_compute_waits(default_trace, default_hw):
    tl, _ = simulate(default_trace, default_hw, SimConfig(Policy.CACHE, warm_start=False))
    transfers_end = sorted(e.end for e in tl.of_kind(EventKind.TRANSFER))
    stalls = tl.of_kind(EventKind.STALL)
    assert stalls
    for s in stalls:
        assert s.end > s.start
        assert s.end in transfers_end  # a stall ends exactly when weights land


def test_determinism_default(default_trace, default_hw):
    a = simulate(default_trace, default_hw, SimConfig(Policy.CACHE_DYQUANT_PREFETCH_42))
    b = simulate(default_trace, default_hw, SimConfig(Policy.CACHE_DYQUANT_PREFETCH_42))
    assert a[0].events == b[0].events and a[1] == b[1]


# -- ordering properties -----------------------------------------------------------


def test_baseline_dominance(default_trace, default_hw):
    t = [simulate(default_trace, default_hw, SimConfig(p))[1].tpot
         for p in (Policy.LOAD_ON_DEMAND, Policy.CACHE, Policy.CACHE_PREFETCH)]
    assert t[0] >= t[1] >= t[2]


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("lam", [0.0, 0.3, 0.5])
@pytest.mark.parametrize("frac", [0.1, 0.4])
def test_dyquant_reduces_io(seed, lam, frac):
    spec = default_model_spec(8, 8, 2)
    tr = generate_trace(spec, SynthesisConfig(rng_seed=seed, num_prompt_tokens=24, num_decode_steps=8))
    hw = default_hardware(spec, frac)
    b = [simulate(tr, hw, SimConfig(p, lam=lam))[1].bytes_transferred
         for p in (Policy.CACHE, Policy.CACHE_DYQUANT_42, Policy.CACHE_DYQUANT_40)]
    assert b[1] < b[0] and b[2] <= b[1]


def test_dyquant_io_can_invert_near_full_retention():
    """Pinned counterexample: a different reference stream can cost LRU one extra load."""
    spec = default_model_spec(8, 8, 2)
    tr = generate_trace(spec, SynthesisConfig(rng_seed=4, num_prompt_tokens=24, num_decode_steps=8))
    hw = default_hardware(spec, 0.4)
    b42 = simulate(tr, hw, SimConfig(Policy.CACHE_DYQUANT_42, lam=0.9))[1].bytes_transferred
    b40 = simulate(tr, hw, SimConfig(Policy.CACHE_DYQUANT_40, lam=0.9))[1].bytes_transferred
    assert b40 - b42 == spec.expert_bytes[H]


def test_prefetch_hit_rate_monotone_in_fidelity(default_spec, default_hw):
    rates = []
    for rho in (0.0, 0.5, 1.0):
        tr = generate_trace(default_spec, SynthesisConfig(predictor_fidelity=rho))
        rates.append(simulate(tr, default_hw, SimConfig(Policy.CACHE_PREFETCH))[1].prefetch_hit_rate)
    assert rates[0] <= rates[1] <= rates[2]


def test_perfect_prediction_removes_decode_misses_after_layer0(default_spec):
    tr = generate_trace(default_spec, SynthesisConfig(predictor_fidelity=1.0))
    hw = default_hardware(default_spec)
    tt = hw.transfer_time(default_spec.expert_bytes[H])
    hw = replace(hw, attention_time_decode=2 * tt).with_capacity(math.inf)
    tl, _ = simulate(tr, hw, SimConfig(Policy.CACHE_PREFETCH, warm_start=False))
    demand = [e for e in tl.of_kind(EventKind.TRANSFER) if e.phase == "decode" and e.tag == "demand"]
    assert all(e.layer == 0 for e in demand)


# -- quality proxy ----------------------------------------------------------------


def test_quality_proxy_examples():
    spec = _spec(2, 4, 2)
    g0 = _onehot(4, (0, 0.5), (1, 0.5))
    g1 = _onehot(4, (2, 0.7), (3, 0.3))
    tr = _decode_trace(spec, [g0, g1])
    # layer 1 at lambda = 0 keeps only the top routed expert: 0.7 of its mass
    assert quality_proxy(tr, SimConfig(Policy.CACHE_DYQUANT_40, lam=0.0)) == pytest.approx((1.0 + 0.7) / 2)
    assert quality_proxy(tr, SimConfig(Policy.CACHE_DYQUANT_42, lam=0.0, low_discount=0.5)) == pytest.approx((1.0 + 0.85) / 2)
    assert quality_proxy(tr, SimConfig(Policy.CACHE_DYQUANT_40, lam=1.0)) == 1.0
    assert quality_proxy(tr, SimConfig(Policy.CACHE)) == 1.0


def _quality_oracle(tr, lam, low_weight):
    """Per-token sum: HIGH prefix covers r(l) of the routed mass."""
    L, k = tr.model.num_layers, tr.model.routing_topk
    vals = []
    for layers in tr.decode:
        for l, s in enumerate(layers):
            r = 1.0 if (L == 1 or l == 0) else (1 - lam) * (math.cos(math.pi * l / (L - 1)) + 1) / 2 + lam
            routed = top_k_sorted(s.gate_scores, k)
            g = [float(s.gate_scores[e]) for e in routed]
            total = sum(g)
            if r >= 1.0:
                n_high = len(g)
            else:
                acc, n_high = 0.0, len(g)
                for i, x in enumerate(g):
                    acc += x
                    if acc >= r * total:
                        n_high = i + 1
                        break
            vals.append((sum(g[:n_high]) + low_weight * sum(g[n_high:])) / total)
    return sum(vals) / len(vals)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_quality_proxy_matches_oracle(default_trace, lam):
    assert quality_proxy(default_trace, SimConfig(Policy.CACHE_DYQUANT_40, lam=lam)) == pytest.approx(
        _quality_oracle(default_trace, lam, 0.0), abs=1e-12)
    assert quality_proxy(default_trace, SimConfig(Policy.CACHE_DYQUANT_42, lam=lam, low_discount=0.3)) == pytest.approx(
        _quality_oracle(default_trace, lam, 0.3), abs=1e-12)


# -- ablation ----------------------------------------------------------------------


def test_single_config_speedup_is_one(default_trace, default_hw):
    rep = run_ablation(default_trace, default_hw, [SimConfig(Policy.CACHE)])
    assert rep.rows[0].ttft_speedup == 1.0 and rep.rows[0].tpot_speedup == 1.0


def test_cache_speedup_over_load_on_demand(default_trace, default_hw):
    rep = run_ablation(default_trace, default_hw, [SimConfig(Policy.LOAD_ON_DEMAND), SimConfig(Policy.CACHE)])
    assert rep.rows[1].tpot_speedup > 1.0
    rec = rep.records()[1]
    assert rec["config"] == "cache" and rec["tpot_speedup"] == rep.rows[1].tpot_speedup


def test_empty_ladder_rejected(default_trace, default_hw):
    with pytest.raises(ConfigError):
        run_ablation(default_trace, default_hw, [])


def test_ladder_order():
    assert [c.policy for c in ablation_ladder(0.5)] == list(ABLATION_LADDER)


# -- validation --------------------------------------------------------------------


def test_dimension_mismatch_names_field():
    spec = _spec(2, 4, 1)
    tr = _decode_trace(spec, [_onehot(4, (0, 1.0)), _onehot(4, (1, 1.0))])
    tr.decode[0] = tr.decode[0][:1]
    with pytest.raises(ConfigError) as e:
        simulate(tr, _hw(), SimConfig(Policy.CACHE))
    assert e.value.field == "trace.decode"


def test_t_prefetch_too_large():
    spec = _spec(2, 4, 1)
    tr = _decode_trace(spec, [_onehot(4, (0, 1.0)), _onehot(4, (1, 1.0))])
    with pytest.raises(ConfigError) as e:
        simulate(tr, _hw(), SimConfig(Policy.CACHE_PREFETCH, prefetch=PrefetchConfig(5)))
    assert e.value.field == "t_prefetch"


@pytest.mark.parametrize(
    "kw,field",
    [
        ({"link_bandwidth": 0}, "link_bandwidth"),
        ({"vram_budget": 10, "resident_reservation": 20}, "vram_budget"),
        ({"link_latency": -1}, "link_latency"),
        ({"expert_compute_decode": {H: 1e-3}}, "expert_compute_decode"),
    ],
)
def test_hardware_validation(kw, field):
    with pytest.raises(ConfigError) as e:
        _hw(**kw)
    assert e.value.field == field


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(Policy.CACHE, lam=2.0)
    with pytest.raises(ValueError):
        SimConfig("nope")


def test_dequant_time_adds_to_compute():
    spec = _spec(1, 4, 1)
    tr = _decode_trace(spec, [_onehot(4, (2, 1.0))])
    base = simulate(tr, _hw(), SimConfig(Policy.CACHE))[1].tpot
    slow = simulate(tr, _hw(dequant_time={H: 5e-4, LO: 0.0}), SimConfig(Policy.CACHE))[1].tpot
    assert slow - base == pytest.approx(5e-4)
