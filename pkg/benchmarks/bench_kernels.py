"""Compare the compiled routing kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times a full simulation under each backend, since the kernels are only
part of the engine's cost.
"""

from __future__ import annotations

import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

from moesim import _kernels_py

CASES = [
    # (label, rows, experts, k)
    ("decode-row", 1, 64, 6),
    ("prefill-layer", 64, 64, 6),
    ("long-prompt", 4096, 64, 6),
    ("wide", 512, 256, 8),
]

SIM_SNIPPET = """
import time
from moesim import SynthesisConfig, generate_trace, default_model_spec
from moesim.engine import ablation_ladder, default_hardware, run_ablation
spec = default_model_spec(16, 64, 6)
tr = generate_trace(spec, SynthesisConfig(num_prompt_tokens=256))
hw = default_hardware(spec)
t0 = time.perf_counter()
run_ablation(tr, hw, ablation_ladder())
print(time.perf_counter() - t0)
"""


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> list[tuple]:
    try:
        cy = importlib.import_module("moesim._kernels")
    except ImportError:
        print("compiled extension not built; only the fallback can be timed")
        cy = None
    rng = np.random.default_rng(0)
    rows = []
    for label, n, m, k in CASES:
        g = rng.dirichlet(np.ones(m), size=n)
        h = rng.dirichlet(np.ones(m), size=n)
        for name, call in [
            ("topk_rows", lambda impl: impl.topk_rows(g, k)),
            ("route_counts", lambda impl: impl.route_counts(g, k)),
            ("topk_overlap", lambda impl: impl.topk_overlap(g, h, k)),
        ]:
            py = _time(lambda: call(_kernels_py), repeat)
            c = _time(lambda: call(cy), repeat) if cy is not None else float("nan")
            rows.append((label, name, py, c))
    return rows


def bench_simulation() -> dict[str, float]:
    out = {}
    for backend, env in [("python", "1"), ("cython", "0")]:
        e = dict(os.environ, MOESIM_PURE_PYTHON=env)
        r = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=e, capture_output=True, text=True, check=True)
        out[backend] = float(r.stdout.strip())
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-sim", action="store_true", help="skip the end-to-end simulation timing")
    args = ap.parse_args(argv)

    print(f"{'case':<14} {'kernel':<13} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for label, name, py, c in bench_kernels(args.repeat):
        print(f"{label:<14} {name:<13} {py * 1e6:10.1f} {c * 1e6:10.1f} {py / c:8.2f}x")
    if not args.no_sim:
        sim = bench_simulation()
        print(f"\nablation ladder, 16x64 model, 256 prompt tokens: "
              f"numpy {sim['python']:.3f}s, cython {sim['cython']:.3f}s, "
              f"speedup {sim['python'] / sim['cython']:.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
