"""Report and timeline files.

Report, CSV (default)::

    # format: moesim-report/1
    config,policy,lambda,ttft,tpot,...,ttft_speedup,tpot_speedup
    load_on_demand,load_on_demand,0.5,0.41,...

Sweep reports prepend one column per sweep axis (``lambda``, ``fidelity``,
``capacity_fraction``, ``t_prefetch``) and use the swept value in place of
the config's own lambda. Report, JSON::

    {"format": "moesim-report", "version": 1, "records": [{...}, ...]}

Timeline, CSV, one row per event in timeline order::

    # format: moesim-timeline/1
    start,end,kind,phase,step,layer,expert,precision,tag

``expert`` is -1 and ``precision`` empty for attention and stall events.
``tag`` is ``demand`` or ``prefetch`` for transfers. Floats use ``repr`` so
files are byte-identical across runs and round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
from typing import Iterable, List, Sequence

from .engine import Event, Metrics, Timeline

REPORT_FORMAT = "moesim-report"
REPORT_VERSION = 1
TIMELINE_FORMAT = "moesim-timeline"
TIMELINE_VERSION = 1

REPORT_BASE_FIELDS = ("config", "policy", "lambda") + Metrics.FIELDS + ("ttft_speedup", "tpot_speedup")
TIMELINE_FIELDS = Event._fields


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(getattr(v, "value", v))


def _csv(header: str, fields: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def report_fields(records: List[dict]) -> List[str]:
    if not records:
        return list(REPORT_BASE_FIELDS)
    extra = [k for k in records[0] if k not in REPORT_BASE_FIELDS]
    return extra + list(REPORT_BASE_FIELDS)


def format_report(records: List[dict], fmt: str = "csv") -> str:
    if fmt == "json":
        doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "records": records}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    fields = report_fields(records)
    return _csv(f"# format: {REPORT_FORMAT}/{REPORT_VERSION}", fields, ([r[f] for f in fields] for r in records))


def format_timeline(timeline: Timeline) -> str:
    return _csv(f"# format: {TIMELINE_FORMAT}/{TIMELINE_VERSION}", TIMELINE_FIELDS, timeline.events)


def _read_header(lines: List[str], name: str) -> None:
    if not lines or not lines[0].startswith("# format: "):
        raise ValueError(f"missing '# format: {name}/N' header")
    got = lines[0][len("# format: "):].strip()
    fmt, _, ver = got.partition("/")
    expected = REPORT_VERSION if name == REPORT_FORMAT else TIMELINE_VERSION
    if fmt != name or ver != str(expected):
        raise ValueError(f"unsupported format {got!r}, expected {name}/{expected}")


def parse_report_csv(text: str) -> List[dict]:
    """Rows of a CSV report as dicts of strings (for tools and tests)."""
    lines = text.splitlines()
    _read_header(lines, REPORT_FORMAT)
    return list(csv.DictReader(lines[1:]))


def parse_timeline_csv(text: str) -> List[dict]:
    lines = text.splitlines()
    _read_header(lines, TIMELINE_FORMAT)
    return list(csv.DictReader(lines[1:]))


def write_text(path: str, text: str) -> None:
    """Atomic write so an interrupted run never leaves a half report."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def timeline_filename(index: int, label: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
    return f"timeline_{index:02d}_{safe}.csv"
