"""Thread-safe counters and histograms with a plain-text exposition."""

from __future__ import annotations

import bisect
import math
import threading

from ..controller import RunRecord

LATENCY_BUCKETS = (0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0, 300.0)
TRACE_TOKEN_BUCKETS = (64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384)

COUNTERS = (
    "requests_total",
    "requests_failed_total",
    "early_exits_total",
    "budget_forced_total",
    "checks_total",
    "check_tokens_total",
    "tokens_saved_estimate",
)
PREFIX = "earlyexit_"


class Histogram:
    def __init__(self, buckets) -> None:
        self.buckets = tuple(buckets)
        self.counts = [0] * (len(self.buckets) + 1)
        self.sum = 0.0
        self.count = 0

    def observe(self, value: float) -> None:
        self.counts[bisect.bisect_left(self.buckets, value)] += 1
        self.sum += value
        self.count += 1

    def lines(self, name: str) -> list[str]:
        out = [f"# TYPE {name} histogram"]
        running = 0
        for bound, n in zip(self.buckets + (math.inf,), self.counts):
            running += n
            le = "+Inf" if bound == math.inf else repr(float(bound))
            out.append(f'{name}_bucket{{le="{le}"}} {running}')
        out.append(f"{name}_sum {self.sum!r}")
        out.append(f"{name}_count {self.count}")
        return out


class SessionMetrics:
    """Counters only ever grow; every update holds one lock."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.counters = dict.fromkeys(COUNTERS, 0)
        self.latency = Histogram(LATENCY_BUCKETS)
        self.trace_tokens = Histogram(TRACE_TOKEN_BUCKETS)
        self._natural_tokens = 0
        self._natural_runs = 0

    def request_started(self) -> None:
        with self._lock:
            self.counters["requests_total"] += 1

    def request_failed(self) -> None:
        with self._lock:
            self.counters["requests_failed_total"] += 1

    def record_run(self, rec: RunRecord, latency: float) -> None:
        with self._lock:
            c = self.counters
            c["checks_total"] += len(rec.check_events)
            c["check_tokens_total"] += rec.tokens_check_overhead
            if rec.exit_kind == "early_exit":
                c["early_exits_total"] += 1
                # saved = how much shorter than the natural traces seen so far
                if self._natural_runs:
                    mean = self._natural_tokens / self._natural_runs
                    c["tokens_saved_estimate"] += max(0, round(mean - rec.tokens_think))
            elif rec.exit_kind == "budget_forced":
                c["budget_forced_total"] += 1
            elif rec.exit_kind == "natural":
                self._natural_tokens += rec.tokens_think
                self._natural_runs += 1
            self.latency.observe(latency)
            self.trace_tokens.observe(rec.tokens_think)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self.counters)

    def exposition(self) -> str:
        with self._lock:
            lines = []
            for name in COUNTERS:
                lines.append(f"# TYPE {PREFIX}{name} counter")
                lines.append(f"{PREFIX}{name} {self.counters[name]}")
            lines += self.latency.lines(PREFIX + "latency_seconds")
            lines += self.trace_tokens.lines(PREFIX + "trace_tokens")
        return "\n".join(lines) + "\n"


def parse_exposition(text: str) -> list[tuple[str, float]]:
    """(name, value) pairs of a metrics text; comment lines are skipped."""
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, _, value = line.rpartition(" ")
        out.append((name, float(value)))
    return out
