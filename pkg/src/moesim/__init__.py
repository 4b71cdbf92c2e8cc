"""Trace-driven simulation of mixed-precision expert offloading for MoE inference."""

from .cache import CacheEntry, ExpertCache, ExpertKey, LookupOutcome, OutcomeKind
from .engine import (
    ABLATION_LADDER,
    HardwareSpec,
    Metrics,
    Policy,
    SimConfig,
    Timeline,
    ablation_ladder,
    default_hardware,
    quality_proxy,
    run_ablation,
    simulate,
)
from .importance import HeavyHitterConfig, ImportanceScores, Phase
from .prefetcher import PrefetchConfig, PrefetchRequest
from .scheduler import PolicyConfig, PrecisionAssignment, critical_count, retention_ratio
from .traceio import load_trace, save_trace
from .traces import InferenceTrace, ModelSpec, Precision, SynthesisConfig, TokenStep, default_model_spec, generate_trace

__version__ = "0.1.0"
