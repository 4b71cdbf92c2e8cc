"""``moesim`` command line.

Exit codes: 0 success, 1 invalid input (bad flags, config or trace
contents), 2 I/O failure (missing or unwritable files).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .config import OUTPUT_ENV, SWEEP_KEYS, RunConfig, load_run_config
from .engine import SimConfig, run_ablation, simulate
from .errors import ConfigError, TraceError
from .prefetcher import PrefetchConfig
from .report import format_report, format_timeline, timeline_filename, write_text
from .traceio import save_trace
from .traces import SynthesisConfig, default_model_spec, generate_trace

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _output_dir(arg: Optional[str], cfg: Optional[RunConfig] = None) -> str:
    if arg:
        return arg
    if cfg is not None:
        return cfg.output_dir
    return os.environ.get(OUTPUT_ENV) or "moesim-out"


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_IO, f"output directory {path} is not writable")


# -- gen-trace ---------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    try:
        spec = default_model_spec(args.layers, args.experts, args.topk)
        syn = SynthesisConfig(
            num_prompt_tokens=args.tokens,
            num_decode_steps=args.decode_steps,
            skew_alpha=args.skew,
            heavy_hitter_fraction=args.hh_frac,
            predictor_fidelity=args.fidelity,
            rng_seed=args.seed,
        )
    except ConfigError as exc:
        raise CliError(EXIT_VALIDATION, _flag_message(exc)) from None
    trace = generate_trace(spec, syn)
    out = args.out
    if out is None:
        d = _output_dir(None)
        _ensure_dir(d)
        out = os.path.join(d, f"trace_seed{args.seed}.jsonl")
    try:
        save_trace(trace, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc.strerror}") from None
    print(f"wrote {trace.num_records} records to {out}")
    return EXIT_OK


_FLAG_FOR_FIELD = {
    "num_layers": "layers",
    "num_experts": "experts",
    "routing_topk": "topk",
    "num_prompt_tokens": "tokens",
    "num_decode_steps": "decode_steps",
    "skew_alpha": "skew",
    "heavy_hitter_fraction": "hh_frac",
    "predictor_fidelity": "fidelity",
    "rng_seed": "seed",
}


def _flag_message(exc: ConfigError) -> str:
    flag = _FLAG_FOR_FIELD.get(exc.field, exc.field)
    detail = str(exc).split(": ", 1)[-1]
    return f"invalid --{flag.replace('_', '-')} ({flag}): {detail}"


# -- run ----------------------------------------------------------------------


def _load(path: str) -> RunConfig:
    return load_run_config(path)


def _write_outputs(out_dir: str, records: List[dict], timelines, cfg: RunConfig, labels: Sequence[str]) -> List[str]:
    _ensure_dir(out_dir)
    ext = "json" if cfg.report_format == "json" else "csv"
    paths = [os.path.join(out_dir, f"report.{ext}")]
    try:
        write_text(paths[0], format_report(records, cfg.report_format))
        if cfg.write_timeline and timelines is not None:
            for i, (tl, label) in enumerate(zip(timelines, labels)):
                p = os.path.join(out_dir, timeline_filename(i, label))
                write_text(p, format_timeline(tl))
                paths.append(p)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out_dir}: {exc.strerror}") from None
    return paths


def cmd_run(args) -> int:
    cfg = _load(args.config)
    trace = cfg.load_trace()
    report = run_ablation(trace, cfg.hardware, cfg.configs)
    out_dir = _output_dir(args.out_dir, cfg)
    labels = [c.label for c in cfg.configs]
    paths = _write_outputs(out_dir, report.records(), report.timelines, cfg, labels)
    print(f"wrote {len(report.rows)} records to {paths[0]}")
    return EXIT_OK


# -- sweep --------------------------------------------------------------------


def sweep_cells(grid: dict) -> List[dict]:
    """Cross product of the grid, in grid order with the last axis varying fastest."""
    if not grid:
        raise ConfigError("sweep", "grid is empty")
    for k, v in grid.items():
        if not v:
            raise ConfigError(f"sweep.{k}", "axis has no values")
    axes = [k for k in SWEEP_KEYS if k in grid]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def _cell_configs(cell: dict, configs: Sequence[SimConfig]) -> List[SimConfig]:
    out = []
    for c in configs:
        if "lambda" in cell:
            c = replace(c, lam=float(cell["lambda"]))
        if "t_prefetch" in cell:
            t = cell["t_prefetch"]
            c = replace(c, prefetch=PrefetchConfig(None if t is None else int(t)))
        out.append(c)
    return out


def _run_cell(job: Tuple[RunConfig, dict]) -> List[dict]:
    cfg, cell = job
    fid = cell.get("fidelity")
    trace = cfg.load_trace(None if fid is None else float(fid))
    hw = cfg.hardware_for(None if "capacity_fraction" not in cell else float(cell["capacity_fraction"]))
    report = run_ablation(trace, hw, _cell_configs(cell, cfg.configs))
    rows = []
    for rec in report.records():
        row = {k: v for k, v in cell.items() if k != "lambda"}  # swept lambda lands in rec
        row.update(rec)
        rows.append(row)
    return rows


def run_sweep(cfg: RunConfig, jobs: int = 1) -> List[dict]:
    cells = sweep_cells(cfg.sweep)
    # validate every cell before spending time on any of them
    for cell in cells:
        _cell_configs(cell, cfg.configs)
        if "capacity_fraction" in cell and float(cell["capacity_fraction"]) < 0:
            raise ConfigError("sweep.capacity_fraction", "must be >= 0")
        if "fidelity" in cell:
            replace(cfg.synthesis, predictor_fidelity=float(cell["fidelity"]))
    work = [(cfg, cell) for cell in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))  # map keeps grid order
    else:
        results = [_run_cell(w) for w in work]
    return [row for rows in results for row in rows]


def cmd_sweep(args) -> int:
    cfg = _load(args.config)
    rows = run_sweep(cfg, args.jobs)
    out_dir = _output_dir(args.out_dir, cfg)
    cfg = replace(cfg, write_timeline=False)
    paths = _write_outputs(out_dir, rows, None, cfg, [])
    print(f"wrote {len(rows)} records to {paths[0]}")
    return EXIT_OK


# -- dump-timeline ------------------------------------------------------------


def cmd_dump_timeline(args) -> int:
    cfg = _load(args.config)
    labels = [c.label for c in cfg.configs]
    if args.name is not None:
        if args.name not in labels:
            raise ConfigError("name", f"no config named {args.name!r} (have {', '.join(labels)})")
        idx = labels.index(args.name)
    else:
        idx = args.index
        if not 0 <= idx < len(cfg.configs):
            raise ConfigError("index", f"must be in [0, {len(cfg.configs) - 1}]")
    trace = cfg.load_trace()
    timeline, _ = simulate(trace, cfg.hardware, cfg.configs[idx])
    text = format_timeline(timeline)
    if args.out == "-":
        sys.stdout.write(text)
        return EXIT_OK
    out = args.out
    if out is None:
        d = _output_dir(None, cfg)
        _ensure_dir(d)
        out = os.path.join(d, timeline_filename(idx, labels[idx]))
    try:
        write_text(out, text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc.strerror}") from None
    print(f"wrote {len(timeline.events)} events to {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moesim", description="Replay MoE expert-offloading traces.")
    p.add_argument("--version", action="version", version=f"moesim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic trace file")
    g.add_argument("--layers", type=int, default=16)
    g.add_argument("--experts", type=int, default=8)
    g.add_argument("--topk", type=int, default=2)
    g.add_argument("--tokens", type=int, default=64, help="prompt length")
    g.add_argument("--decode-steps", type=int, default=32)
    g.add_argument("--skew", type=float, default=1.2, help="Zipf exponent of expert popularity")
    g.add_argument("--hh-frac", type=float, default=0.2, help="share of heavy-hitter prompt tokens")
    g.add_argument("--fidelity", type=float, default=0.8, help="predictor fidelity in [0, 1]")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output path (default: ${OUTPUT_ENV}/trace_seed<seed>.jsonl)")
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="simulate each config in a run file")
    r.add_argument("config")
    r.add_argument("--out-dir", help=f"overrides output.dir and ${OUTPUT_ENV}")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="simulate the cross product of the sweep grid")
    s.add_argument("config")
    s.add_argument("--out-dir")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("dump-timeline", help="write the event timeline of one config")
    d.add_argument("config")
    sel = d.add_mutually_exclusive_group()
    sel.add_argument("--index", type=int, default=0)
    sel.add_argument("--name")
    d.add_argument("--out", help="output path, or '-' for stdout")
    d.set_defaults(func=cmd_dump_timeline)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; that is a validation error here
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BrokenPipeError:  # e.g. piped into head
        sys.stderr.close()
        return EXIT_OK
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"error: {exc.strerror or exc}: {name}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
