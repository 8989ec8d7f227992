"""Multi-seed benchmark runs and parameter sweeps.

Every (sample, policy, seed) triple is one controller run. Runs execute on
a bounded thread pool; aggregation happens afterwards on the main thread
from the per-run outcomes, which are also persisted as JSONL so a report
can be re-derived later with :func:`report_from_records`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Sequence

from ..backend.base import Backend
from ..backend.http import make_backend
from ..controller import ControllerConfig, ExitPolicy, RunFailed, RunRecord, run
from .dataset import Sample, load_dataset
from .grading import grade, is_string_fallback

SWEEP_AXES = ("budget", "k", "tau")


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class Sweep:
    axis: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise BenchError(f"sweep axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise BenchError("sweep needs at least one value")
        cast = float if self.axis == "tau" else int
        values = tuple(cast(v) for v in self.values)
        if self.axis != "tau" and any(v != float(w) for v, w in zip(values, self.values)):
            raise BenchError(f"{self.axis} values must be integers")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise BenchError("sweep values must be strictly increasing")
        lo, hi = {"budget": (2048, 16384), "k": (0, math.inf), "tau": (0, 100)}[self.axis]
        for v in values:
            if not lo <= v <= hi:
                raise BenchError(f"{self.axis} value {v} outside [{lo}, {hi}]")
        object.__setattr__(self, "values", values)

    def apply(self, config: ControllerConfig, value) -> ControllerConfig:
        if self.axis == "budget":
            return config.with_overrides(max_len=int(value))
        if self.axis == "k":
            return config.with_overrides(k=int(value))
        return config.with_overrides(tau=float(value))


@dataclass
class BenchConfig:
    dataset_path: str
    policies: list[ExitPolicy]
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    seeds: int = 3
    parallelism: int = 4
    sweep: Sweep | None = None
    backend: str = ""
    check_backend: str | None = None
    records_dir: str | None = None

    def __post_init__(self) -> None:
        if self.seeds < 1:
            raise BenchError("seeds must be >= 1")
        if self.parallelism < 1:
            raise BenchError("parallelism must be >= 1")
        if not self.policies:
            raise BenchError("at least one policy is required")
        self.policies = [ExitPolicy.parse(p) if isinstance(p, str) else p for p in self.policies]


@dataclass
class Outcome:
    """One run plus its grading, as persisted next to the record."""

    sample_id: str
    policy: str
    seed: int
    task_kind: str
    record: RunRecord
    correct: bool
    failed: bool
    string_fallback: bool

    def to_dict(self) -> dict[str, Any]:
        d = self.record.to_dict()
        d.update(
            sample_id=self.sample_id, policy=self.policy, seed=self.seed, task_kind=self.task_kind,
            correct=self.correct, failed=self.failed, string_fallback=self.string_fallback,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Outcome:
        return cls(
            d["sample_id"], d["policy"], d["seed"], d["task_kind"], RunRecord.from_dict(d),
            d["correct"], d["failed"], d["string_fallback"],
        )


@dataclass
class ReportRow:
    policy: str
    axis: str | None
    value: float | None
    acc_mean: float
    tok_mean: float
    trace_tok_mean: float
    latency_p50: float
    latency_p95: float
    checks_mean: float
    overhead_tokens_mean: float
    n_samples: int
    n_failed: int
    n_failed_runs: int
    n_ungraded: int
    n_string_fallback: int
    pass_at_1: dict[str, float] = field(default_factory=dict)


@dataclass
class Report:
    rows: list[ReportRow]
    axis: str | None = None
    value: float | None = None
    records_path: str | None = None
    record_refs: list[str] = field(default_factory=list)

    def row(self, policy: str) -> ReportRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_dict(self) -> dict[str, Any]:
        return {
            "axis": self.axis,
            "value": self.value,
            "records_path": self.records_path,
            "record_refs": list(self.record_refs),
            "rows": [asdict(r) for r in self.rows],
        }


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolated percentile, q in [0, 100]."""
    if not values:
        return 0.0
    xs = sorted(values)
    pos = (len(xs) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def aggregate(outcomes: Sequence[Outcome], policies: Sequence[str], axis=None, value=None) -> list[ReportRow]:
    by_policy: dict[str, dict[str, list[Outcome]]] = {p: {} for p in policies}
    for o in outcomes:
        by_policy.setdefault(o.policy, {}).setdefault(o.sample_id, []).append(o)
    # a sample whose every seed failed under some policy is dropped everywhere
    excluded = {
        sid
        for runs in by_policy.values()
        for sid, outs in runs.items()
        if all(o.failed for o in outs)
    }
    rows = []
    for policy in policies:
        runs = {sid: outs for sid, outs in by_policy.get(policy, {}).items() if sid not in excluded}
        pass_at_1: dict[str, float] = {}
        tok, trace_tok, checks, overhead, latencies = [], [], [], [], []
        ungraded = fallback = failed_runs = 0
        for sid in sorted(runs):
            outs = runs[sid]
            ok = [o for o in outs if not o.failed]
            failed_runs += len(outs) - len(ok)
            fallback += sum(o.string_fallback for o in ok)
            if outs[0].task_kind == "code":
                ungraded += 1
            else:
                pass_at_1[sid] = fmean(o.correct for o in outs)
            tok.append(fmean(o.record.tokens_main for o in ok))
            trace_tok.append(fmean(o.record.tokens_think for o in ok))
            checks.append(fmean(len(o.record.check_events) for o in ok))
            overhead.append(fmean(o.record.tokens_check_overhead for o in ok))
            latencies.extend(o.record.wall_latency for o in ok)
        rows.append(ReportRow(
            policy=policy,
            axis=axis,
            value=value,
            acc_mean=fmean(pass_at_1.values()) if pass_at_1 else 0.0,
            tok_mean=fmean(tok) if tok else 0.0,
            trace_tok_mean=fmean(trace_tok) if trace_tok else 0.0,
            latency_p50=percentile(latencies, 50),
            latency_p95=percentile(latencies, 95),
            checks_mean=fmean(checks) if checks else 0.0,
            overhead_tokens_mean=fmean(overhead) if overhead else 0.0,
            n_samples=len(runs),
            n_failed=len(excluded),
            n_failed_runs=failed_runs,
            n_ungraded=ungraded,
            n_string_fallback=fallback,
            pass_at_1=pass_at_1,
        ))
    return rows


def _run_one(sample: Sample, policy: ExitPolicy, seed: int, config: ControllerConfig,
             backend: Backend, check_backend: Backend | None) -> Outcome:
    cfg = config if config.task_kind == sample.task_kind else config.with_overrides(task_kind=sample.task_kind)
    try:
        rec = run(sample.question, policy, cfg, backend, check_backend, question_id=sample.id, seed=seed)
        failed = False
    except RunFailed as exc:
        rec, failed = exc.record, True
    correct = not failed and grade(rec.answer, sample.gold_answer, sample.task_kind)
    fallback = not failed and is_string_fallback(rec.answer, sample.gold_answer, sample.task_kind)
    return Outcome(sample.id, policy.name, seed, sample.task_kind, rec, correct, failed, fallback)


def _backends(config: BenchConfig, backend, check_backend) -> tuple[Backend, Backend | None]:
    if backend is None:
        if not config.backend:
            raise BenchError("no backend configured")
        backend = make_backend(config.backend)
    if check_backend is None and config.check_backend:
        check_backend = make_backend(config.check_backend)
    return backend, check_backend


def execute(samples: Sequence[Sample], policies: Sequence[ExitPolicy], config: ControllerConfig,
            seeds: int, parallelism: int, backend: Backend,
            check_backend: Backend | None = None) -> list[Outcome]:
    """Run every (sample, policy, seed); results come back in that nesting order."""
    jobs = [(s, p, seed) for p in policies for s in samples for seed in range(seeds)]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(_run_one, s, p, seed, config, backend, check_backend) for s, p, seed in jobs]
        return [f.result() for f in futures]


def write_outcomes(outcomes: Sequence[Outcome], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for o in outcomes:
            f.write(json.dumps(o.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_outcomes(path) -> list[Outcome]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Outcome.from_dict(json.loads(line)) for line in lines if line.strip()]


def report_from_records(path, policies: Sequence[str] | None = None, axis=None, value=None) -> Report:
    """Rebuild a report from persisted outcomes."""
    outcomes = read_outcomes(path)
    if policies is None:
        policies = list(dict.fromkeys(o.policy for o in outcomes))
    return Report(aggregate(outcomes, policies, axis, value), axis, value, str(path),
                  _refs(outcomes))


def _refs(outcomes: Sequence[Outcome]) -> list[str]:
    return [f"{o.policy}/{o.sample_id}/{o.seed}" for o in outcomes]


def _records_file(config: BenchConfig, axis, value) -> Path | None:
    if not config.records_dir:
        return None
    name = "records.jsonl" if axis is None else f"records-{axis}-{value}.jsonl"
    return Path(config.records_dir) / name


def run_bench(config: BenchConfig, backend: Backend | None = None,
              check_backend: Backend | None = None, *, _axis=None, _value=None,
              _controller: ControllerConfig | None = None) -> Report:
    samples = load_dataset(config.dataset_path)
    backend, check_backend = _backends(config, backend, check_backend)
    controller = _controller or config.controller
    outcomes = execute(samples, config.policies, controller, config.seeds, config.parallelism,
                       backend, check_backend)
    path = _records_file(config, _axis, _value)
    if path is not None:
        write_outcomes(outcomes, path)
    names = list(dict.fromkeys(p.name for p in config.policies))
    return Report(aggregate(outcomes, names, _axis, _value), _axis, _value,
                  str(path) if path else None, _refs(outcomes))


def sweep(config: BenchConfig, backend: Backend | None = None,
          check_backend: Backend | None = None) -> list[Report]:
    if config.sweep is None:
        raise BenchError("sweep requires a sweep axis")
    backend, check_backend = _backends(config, backend, check_backend)
    reports = []
    for value in config.sweep.values:
        try:
            controller = config.sweep.apply(config.controller, value)
        except ValueError as exc:
            raise BenchError(f"{config.sweep.axis}={value}: {exc}") from exc
        reports.append(run_bench(config, backend, check_backend, _axis=config.sweep.axis,
                                 _value=value, _controller=controller))
    return reports
