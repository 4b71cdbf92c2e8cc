"""YAML run configuration for the ``run``, ``sweep`` and ``dump-timeline`` commands.

Example::

    trace:
      synthetic:            # or:  path: traces/req0.jsonl
        model: {num_layers: 16, num_experts: 8, routing_topk: 2}
        num_prompt_tokens: 64
        num_decode_steps: 32
        skew_alpha: 1.2
        predictor_fidelity: 0.8
        rng_seed: 0
    hardware:
      capacity_fraction: 0.4   # of all HIGH expert bytes; overrides vram_budget
      link_bandwidth: 2.0e10   # any HardwareSpec field may be overridden
    ladder: ablation          # the six-row ablation ladder; or a list under 'configs'
    configs:
      - {name: dyq, policy: cache_dyquant_4_2_prefetch, lambda: 0.5}
    output: {dir: out, format: csv, timeline: true}
    sweep:                    # only read by 'sweep'
      lambda: [0.0, 0.5, 1.0]
      capacity_fraction: [0.2, 0.4, 0.8]
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import yaml

from .engine import ABLATION_LADDER, HardwareSpec, Policy, SimConfig, default_hardware
from .errors import ConfigError
from .importance import HeavyHitterConfig
from .prefetcher import PrefetchConfig
from .traces import InferenceTrace, ModelSpec, Precision, SynthesisConfig, default_model_spec, generate_trace

OUTPUT_ENV = "MOESIM_OUTPUT_DIR"
SWEEP_KEYS = ("lambda", "fidelity", "capacity_fraction", "t_prefetch")


class ConfigParseError(ConfigError):
    """Raised for YAML syntax errors; carries the 1-based line."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__("config", f"line {line}: {message}")


def _line_index(node, path=(), out=None) -> Dict[tuple, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_index(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


class _Doc:
    """Parsed YAML plus a path -> line map for error messages."""

    def __init__(self, text: str, source: str):
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            raise ConfigParseError(mark.line + 1 if mark else 0, str(exc.problem or exc)) from None
        if not isinstance(data, dict):
            raise ConfigParseError(1, "top level must be a mapping")
        self.data = data
        self.source = source
        self.lines = _line_index(node) if node is not None else {}

    def fail(self, path: tuple, message: str) -> ConfigError:
        name = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
        line = None
        for n in range(len(path), -1, -1):
            line = self.lines.get(tuple(path[:n]))
            if line is not None:
                break
        where = f" (line {line})" if line else ""
        return ConfigError(name, f"{message}{where}")


@dataclass
class RunConfig:
    trace_path: Optional[str]
    synthesis: Optional[SynthesisConfig]
    model: ModelSpec
    hardware: HardwareSpec
    configs: List[SimConfig]
    output_dir: str
    report_format: str = "csv"
    write_timeline: bool = True
    sweep: Dict[str, list] = field(default_factory=dict)
    hardware_overrides: Dict[str, Any] = field(default_factory=dict)
    capacity_fraction: Optional[float] = None

    def load_trace(self, fidelity: Optional[float] = None) -> InferenceTrace:
        from .traceio import load_trace

        if self.trace_path is not None:
            if fidelity is not None:
                raise ConfigError("sweep.fidelity", "needs a synthetic trace source")
            trace = load_trace(self.trace_path)
            if trace.model.num_layers != self.model.num_layers or trace.model.num_experts != self.model.num_experts:
                raise ConfigError("trace.path", "trace model does not match")
            return trace
        syn = self.synthesis if fidelity is None else replace(self.synthesis, predictor_fidelity=fidelity)
        return generate_trace(self.model, syn)

    def hardware_for(self, capacity_fraction: Optional[float] = None) -> HardwareSpec:
        if capacity_fraction is None:
            return self.hardware
        return self.hardware.with_capacity(capacity_fraction * self.model.total_expert_bytes_high)


def _sim_config(doc: _Doc, raw: Any, path: tuple) -> SimConfig:
    if not isinstance(raw, dict):
        raise doc.fail(path, "must be a mapping")
    known = {"name", "policy", "lambda", "k_tokens", "t_prefetch", "renormalize_on_skip", "low_discount", "warm_start"}
    extra = set(raw) - known
    if extra:
        raise doc.fail(path + (sorted(extra)[0],), "unknown field")
    if "policy" not in raw:
        raise doc.fail(path + ("policy",), "is required")
    try:
        policy = Policy(raw["policy"])
    except ValueError:
        choices = ", ".join(p.value for p in Policy)
        raise doc.fail(path + ("policy",), f"unknown policy {raw['policy']!r} (one of {choices})") from None
    try:
        return SimConfig(
            policy=policy,
            lam=float(raw.get("lambda", 0.5)),
            heavy_hitter=HeavyHitterConfig(int(raw["k_tokens"])) if "k_tokens" in raw else None,
            prefetch=PrefetchConfig(int(raw["t_prefetch"]) if raw.get("t_prefetch") is not None else None),
            renormalize_on_skip=bool(raw.get("renormalize_on_skip", True)),
            low_discount=float(raw.get("low_discount", 0.5)),
            warm_start=bool(raw.get("warm_start", True)),
            name=raw.get("name"),
        )
    except ConfigError as exc:
        key = {"lambda": "lambda"}.get(exc.field, exc.field)
        raise doc.fail(path + (key,), str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise doc.fail(path, str(exc)) from None


def _model(doc: _Doc, raw: Any, path: tuple) -> ModelSpec:
    if raw is None:
        return default_model_spec()
    if not isinstance(raw, dict):
        raise doc.fail(path, "must be a mapping")
    base = default_model_spec().to_dict()
    base.update(raw)
    try:
        return ModelSpec.from_dict(base)
    except ConfigError as exc:
        raise doc.fail(path + (exc.field,), str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError, KeyError) as exc:
        raise doc.fail(path, str(exc)) from None


def _hardware(doc: _Doc, raw: Any, model: ModelSpec):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise doc.fail(("hardware",), "must be a mapping")
    raw = dict(raw)
    frac = raw.pop("capacity_fraction", None)
    hw = default_hardware(model)
    fields = set(hw.to_dict())
    for k in raw:
        if k not in fields:
            raise doc.fail(("hardware", k), "unknown field")
    if raw.get("vram_budget") in ("inf", "unbounded"):
        raw["vram_budget"] = float("inf")
    try:
        hw = replace(hw, **raw)
        if frac is not None:
            frac = float(frac)
            if frac < 0:
                raise ConfigError("capacity_fraction", "must be >= 0")
            hw = hw.with_capacity(frac * model.total_expert_bytes_high)
    except ConfigError as exc:
        raise doc.fail(("hardware", exc.field), str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise doc.fail(("hardware",), str(exc)) from None
    return hw, raw, frac


def parse_run_config(text: str, source: str = "<config>", base_dir: str = ".") -> RunConfig:
    doc = _Doc(text, source)
    d = doc.data
    trace = d.get("trace")
    if not isinstance(trace, dict) or ("path" in trace) == ("synthetic" in trace):
        raise doc.fail(("trace",), "needs exactly one of 'path' or 'synthetic'")
    trace_path = synthesis = None
    if "path" in trace:
        trace_path = os.path.join(base_dir, str(trace["path"]))
        model_raw = trace.get("model")
        model = _model(doc, model_raw, ("trace", "model")) if model_raw is not None else None
    else:
        syn = trace["synthetic"]
        if not isinstance(syn, dict):
            raise doc.fail(("trace", "synthetic"), "must be a mapping")
        syn = dict(syn)
        model = _model(doc, syn.pop("model", None), ("trace", "synthetic", "model"))
        try:
            synthesis = SynthesisConfig(**syn)
        except ConfigError as exc:
            raise doc.fail(("trace", "synthetic", exc.field), str(exc).split(": ", 1)[-1]) from None
        except TypeError as exc:
            raise doc.fail(("trace", "synthetic"), str(exc)) from None
    if model is None:
        from .traceio import load_trace

        try:
            model = load_trace(trace_path).model
        except FileNotFoundError:
            raise
    hw, overrides, frac = _hardware(doc, d.get("hardware"), model)

    configs: List[SimConfig] = []
    ladder = d.get("ladder")
    if ladder is not None:
        if ladder != "ablation":
            raise doc.fail(("ladder",), "only 'ablation' is supported")
        lam = float(d.get("lambda", 0.5))
        configs.extend(SimConfig(p, lam=lam) for p in ABLATION_LADDER)
    raw_configs = d.get("configs", [])
    if not isinstance(raw_configs, list):
        raise doc.fail(("configs",), "must be a list")
    configs.extend(_sim_config(doc, c, ("configs", i)) for i, c in enumerate(raw_configs))
    if not configs:
        raise doc.fail(("configs",), "no simulation configs given (use 'configs' or 'ladder')")

    out = d.get("output", {}) or {}
    out_dir = out.get("dir") or os.environ.get(OUTPUT_ENV) or "moesim-out"
    fmt = out.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise doc.fail(("output", "format"), "must be 'csv' or 'json'")

    sweep = d.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise doc.fail(("sweep",), "must be a mapping")
    for k, v in sweep.items():
        if k not in SWEEP_KEYS:
            raise doc.fail(("sweep", k), f"unknown sweep axis (one of {', '.join(SWEEP_KEYS)})")
        if not isinstance(v, list):
            raise doc.fail(("sweep", k), "must be a list")
    if "fidelity" in sweep and trace_path is not None:
        raise doc.fail(("sweep", "fidelity"), "needs a synthetic trace source")

    return RunConfig(
        trace_path=trace_path,
        synthesis=synthesis,
        model=model,
        hardware=hw,
        configs=configs,
        output_dir=out_dir,
        report_format=fmt,
        write_timeline=bool(out.get("timeline", True)),
        sweep=sweep,
        hardware_overrides=overrides,
        capacity_fraction=frac,
    )


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_run_config(text, source=path, base_dir=os.path.dirname(os.path.abspath(path)))


__all__ = ["RunConfig", "ConfigParseError", "parse_run_config", "load_run_config", "OUTPUT_ENV", "Precision"]
