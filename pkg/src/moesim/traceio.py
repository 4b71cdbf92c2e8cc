"""Line-delimited JSON trace files.

Layout, one JSON object per line::

    {"kind": "header", "format_version": 1, "model": {...}, "metadata": {...},
     "num_prompt_tokens": T, "num_decode_steps": S}
    {"kind": "step", "phase": "prefill", "step": 0, "layer": l, "token": i,
     "gate": [...], "pred": [...] | null, "s": 0.73}
    ...                                   # prefill: layer-major, then token
    {"kind": "step", "phase": "decode", "step": d, "layer": l, "token": i,
     "gate": [...], "pred": [...] | null}
    ...                                   # decode: step-major, then layer
    {"kind": "end", "records": N}

Floats are written with ``repr`` precision so a save/load round trip is
exact. Loading is all-or-nothing: any defect raises before a trace is
returned.
"""

from __future__ import annotations

import json
import os
from typing import IO, Iterator, Union

import numpy as np

from .errors import TraceParseError, TraceSchemaError
from .traces import InferenceTrace, ModelSpec, TokenStep, check_step

FORMAT_VERSION = 1

PathLike = Union[str, "os.PathLike[str]"]


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def iter_lines(trace: InferenceTrace) -> Iterator[str]:
    header = {
        "kind": "header",
        "format_version": FORMAT_VERSION,
        "model": trace.model.to_dict(),
        "metadata": trace.metadata,
        "num_prompt_tokens": trace.num_prompt_tokens,
        "num_decode_steps": trace.num_decode_steps,
    }
    yield _dump(header)
    n = 0
    for layer, row in enumerate(trace.prefill):
        for s in row:
            yield _dump(_step_record("prefill", 0, layer, s))
            n += 1
    for d, layers in enumerate(trace.decode):
        for layer, s in enumerate(layers):
            yield _dump(_step_record("decode", d, layer, s))
            n += 1
    yield _dump({"kind": "end", "records": n})


def _step_record(phase: str, step: int, layer: int, s: TokenStep) -> dict:
    rec = {
        "kind": "step",
        "phase": phase,
        "step": step,
        "layer": layer,
        "token": s.token_id,
        "gate": s.gate_scores.tolist(),
        "pred": None if s.predicted_next_gate_scores is None else s.predicted_next_gate_scores.tolist(),
    }
    if s.attention_importance is not None:
        rec["s"] = s.attention_importance
    return rec


def save_trace(trace: InferenceTrace, path: PathLike) -> None:
    trace.validate()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for line in iter_lines(trace):
            f.write(line)
            f.write("\n")
    os.replace(tmp, path)


def load_trace(path: PathLike) -> InferenceTrace:
    with open(path, "r", encoding="utf-8") as f:
        return read_trace(f)


def _parse(line_no: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(line_no, f"malformed JSON ({exc.msg})") from None
    if not isinstance(rec, dict) or "kind" not in rec:
        raise TraceParseError(line_no, "record is not an object with a 'kind' field")
    return rec


def _expected_positions(model: ModelSpec, T: int, S: int):
    for layer in range(model.num_layers):
        for i in range(T):
            yield "prefill", 0, layer
    for d in range(S):
        for layer in range(model.num_layers):
            yield "decode", d, layer


def read_trace(f: IO[str]) -> InferenceTrace:
    """Parse a trace from an open text stream, streaming line by line."""
    line_no = 0
    header = None
    for raw in f:
        line_no += 1
        if raw.strip():
            header = _parse(line_no, raw)
            break
    if header is None:
        raise TraceParseError(max(line_no, 1), "empty file, expected header record")
    if header.get("kind") != "header":
        raise TraceParseError(line_no, "first record must be the header")
    if header.get("format_version") != FORMAT_VERSION:
        raise TraceParseError(line_no, f"unsupported format_version {header.get('format_version')!r}")
    try:
        model = ModelSpec.from_dict(header["model"])
        T = int(header["num_prompt_tokens"])
        S = int(header["num_decode_steps"])
        metadata = header.get("metadata", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceParseError(line_no, f"bad header ({exc})") from None

    L = model.num_layers
    prefill = [[] for _ in range(L)]
    decode = [[] for _ in range(S)]
    positions = _expected_positions(model, T, S)
    n_steps = 0
    ended = False
    for raw in f:
        line_no += 1
        if not raw.strip():
            continue
        if ended:
            raise TraceParseError(line_no, "data after end record")
        rec = _parse(line_no, raw)
        kind = rec["kind"]
        if kind == "end":
            if rec.get("records") != n_steps:
                raise TraceParseError(line_no, f"end record says {rec.get('records')} records, read {n_steps}")
            if next(positions, None) is not None:
                raise TraceSchemaError(f"line {line_no}: trace ended before all (layer, token) records")
            ended = True
            continue
        if kind != "step":
            raise TraceParseError(line_no, f"unknown record kind {kind!r}")
        expect = next(positions, None)
        try:
            got = (rec["phase"], int(rec["step"]), int(rec["layer"]))
            token = int(rec["token"])
            gate = np.asarray(rec["gate"], dtype=np.float64)
            pred = rec.get("pred")
            pred = None if pred is None else np.asarray(pred, dtype=np.float64)
            s = rec.get("s")
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(line_no, f"bad step record ({exc})") from None
        if expect is None:
            raise TraceSchemaError(f"line {line_no}: more step records than the header declares")
        if got != expect:
            raise TraceSchemaError(f"line {line_no}: record is {got}, expected {expect}")
        phase, d, layer = got
        step = TokenStep(token, gate, pred, s)
        try:
            check_step(step, model, layer, phase)
        except TraceSchemaError as exc:
            raise TraceSchemaError(f"line {line_no}: {exc}") from None
        if phase == "prefill":
            if s is None:
                raise TraceSchemaError(f"line {line_no}: prefill token {token} layer {layer}: missing 's'")
            col = len(prefill[layer])
            if layer > 0 and prefill[0][col].token_id != token:
                raise TraceSchemaError(
                    f"line {line_no}: prefill layer {layer} column {col} is token {token}, "
                    f"layer 0 has token {prefill[0][col].token_id}"
                )
            prefill[layer].append(step)
        else:
            if decode[d] and decode[d][0].token_id != token:
                raise TraceSchemaError(f"line {line_no}: decode step {d} mixes tokens {decode[d][0].token_id} and {token}")
            decode[d].append(step)
        n_steps += 1
    if not ended:
        raise TraceParseError(line_no, "unexpected end of file (missing end record)")
    return InferenceTrace(model, prefill, decode, metadata)
