"""Report output: CSV, JSON and a markdown Acc/Tok table."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .bench import Report

FORMATS = ("csv", "json", "markdown")

CSV_COLUMNS = (
    "policy", "axis", "value", "acc_mean", "tok_mean", "trace_tok_mean", "latency_p50",
    "latency_p95", "checks_mean", "overhead_tokens_mean", "n_samples", "n_failed",
    "n_failed_runs", "n_ungraded", "n_string_fallback",
)
SWEEP_COLUMNS = ("axis", "value", "policy", "acc", "tok", "latency_p50", "checks")
_INT_COLUMNS = {"n_samples", "n_failed", "n_failed_runs", "n_ungraded", "n_string_fallback"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report.rows:
        w.writerow([_cell(getattr(row, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    out = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: dict = {}
        for key, val in raw.items():
            if key in ("policy", "axis"):
                row[key] = val or None
            elif val == "":
                row[key] = None
            elif key in _INT_COLUMNS:
                row[key] = int(val)
            else:
                row[key] = float(val)
        out.append(row)
    return out


def report_markdown(report: Report) -> str:
    head = ["Method", "Acc", "Tok"]
    if report.axis:
        head.insert(1, report.axis)
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for row in report.rows:
        cells = [row.policy, f"{100 * row.acc_mean:.1f}", f"{row.tok_mean:.0f}"]
        if report.axis:
            cells.insert(1, _cell(row.value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def render_report(report: Report, fmt: str) -> str:
    if fmt == "csv":
        return report_csv(report)
    if fmt == "json":
        return report_json(report)
    if fmt in ("markdown", "markdown-table", "md"):
        return report_markdown(report)
    raise ValueError(f"format must be one of {FORMATS}")


def emit_report(report: Report, path, fmt: str = "csv") -> Path:
    text = render_report(report, fmt)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def sweep_csv(reports: Sequence[Report]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rep in reports:
        for row in rep.rows:
            w.writerow([
                row.axis, _cell(row.value), row.policy, _cell(row.acc_mean), _cell(row.tok_mean),
                _cell(row.latency_p50), _cell(row.checks_mean),
            ])
    return buf.getvalue()
