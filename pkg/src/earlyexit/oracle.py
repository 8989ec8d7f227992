"""Offline search for the earliest sufficient exit point of a recorded trace.

A trace is cut after every sentence; each prefix gets the think-close
marker appended and the model writes a conclusion from there with greedy
decoding. The first prefix whose conclusion grades correct is the optimal
exit. The scan is linear because correctness is not monotone in prefix
length.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import fmean
from typing import Iterable, Mapping, Sequence

from .backend.base import Backend
from .backend.types import BackendError, CompletionRequest
from .controller import ControllerConfig, RunRecord, force_exit
from .harness.dataset import Sample
from .harness.grading import extract_answer, grade
from .prompting import render_reasoning_prompt

logger = logging.getLogger(__name__)

DEFAULT_ABBREVIATIONS = (
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "approx.", "Dr.", "Mr.", "Mrs.", "Ms.", "Prof.",
    "Fig.", "Eq.", "No.", "St.",
)

_TERMINATOR = re.compile(r"[.?!](?=\s|$)")
_PARAGRAPH = re.compile(r"\n[ \t]*\n")


@dataclass(frozen=True)
class SentenceBoundary:
    index: int
    char_offset: int
    preceding_text_tokens: int


@dataclass(frozen=True)
class OptimalExit:
    boundary: SentenceBoundary | None
    optimal_tokens: int
    full_tokens: int
    overthink_ratio: float
    verified: bool = False
    unknown: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)


def _is_abbreviation(trace: str, end: int, abbreviations: Sequence[str]) -> bool:
    for abbr in abbreviations:
        start = end - len(abbr)
        if start >= 0 and trace[start:end] == abbr and (start == 0 or not trace[start - 1].isalnum()):
            return True
    return False


def token_counter(trace_offsets: Sequence[tuple[int, int]] | None):
    """Map a char offset to the tokens generated up to it.

    With recorded ``(char_end, cumulative_tokens)`` pairs this counts whole
    chunks ending at or before the offset; without them, whitespace-split
    words are used as an estimate.
    """
    if trace_offsets:
        ends = [e for e, _ in trace_offsets]
        counts = [n for _, n in trace_offsets]

        def count(text: str, offset: int) -> int:
            i = bisect.bisect_right(ends, offset)
            return counts[i - 1] if i else 0

        return count

    def estimate(text: str, offset: int) -> int:
        return len(text[:offset].split())

    return estimate


def segment_sentences(
    trace: str,
    abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS,
    trace_offsets: Sequence[tuple[int, int]] | None = None,
) -> list[SentenceBoundary]:
    """Sentence boundaries: after . ? ! followed by whitespace or the end, and at blank lines."""
    if not trace:
        raise ValueError("trace must be non-empty")
    offsets: set[int] = set()
    for m in _TERMINATOR.finditer(trace):
        if not _is_abbreviation(trace, m.end(), abbreviations):
            offsets.add(m.end())
    for m in _PARAGRAPH.finditer(trace):
        # the break closes whatever text precedes it, terminated or not
        end = len(trace[: m.start()].rstrip())
        if end > 0:
            offsets.add(end)
    count = token_counter(trace_offsets)
    return [
        SentenceBoundary(i, off, count(trace, off))
        for i, off in enumerate(sorted(offsets), start=1)
    ]


def _conclusion_request(sample: Sample, prefix: str, config: ControllerConfig) -> CompletionRequest:
    fmt = config.chat_format
    prompt = render_reasoning_prompt(sample.question, config.system, fmt) + force_exit(
        prefix, fmt, config.exit_prefix, config.exit_suffix
    )
    return CompletionRequest(
        prompt=prompt,
        max_tokens=max(config.conclusion_reserve, 1),
        temperature=0.0,
        top_p=1.0,
        stream=False,
    )


def _correct(backend: Backend, req: CompletionRequest, sample: Sample) -> bool:
    comp = backend.complete(req)
    return grade(extract_answer(comp.text, sample.task_kind), sample.gold_answer, sample.task_kind)


def find_optimal_exit(
    sample: Sample,
    trace: str,
    backend: Backend,
    config: ControllerConfig | None = None,
    *,
    trace_offsets: Sequence[tuple[int, int]] | None = None,
    full_tokens: int | None = None,
    abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS,
) -> OptimalExit:
    config = config or ControllerConfig()
    boundaries = segment_sentences(trace, abbreviations, trace_offsets)
    if full_tokens is None:
        full_tokens = trace_offsets[-1][1] if trace_offsets else len(trace.split())
    unknown = []
    for b in boundaries:
        req = _conclusion_request(sample, trace[: b.char_offset], config)
        try:
            if not _correct(backend, req, sample):
                continue
        except BackendError as exc:
            logger.warning("boundary %d of %s unknown: %s", b.index, sample.id, exc)
            unknown.append(b.index)
            continue
        try:
            verified = _correct(backend, req, sample)
        except BackendError:
            verified = False
        optimal = min(b.preceding_text_tokens, full_tokens)
        ratio = (full_tokens - optimal) / full_tokens if full_tokens else 0.0
        return OptimalExit(b, optimal, full_tokens, ratio, verified, tuple(unknown))
    return OptimalExit(None, full_tokens, full_tokens, 0.0, False, tuple(unknown))


def oracle_for_record(sample: Sample, record: RunRecord, backend: Backend,
                      config: ControllerConfig | None = None) -> OptimalExit:
    return find_optimal_exit(
        sample, record.trace, backend, config,
        trace_offsets=record.trace_offsets or None, full_tokens=record.tokens_think,
    )


@dataclass(frozen=True)
class GapSummary:
    policy: str
    n: int
    mean_gap: float
    frac_before: float
    frac_exact: float
    frac_after: float
    n_missing: int


def gap_report(records: Iterable[RunRecord], optimal_exits: Mapping[str, OptimalExit]) -> list[GapSummary]:
    """Per-policy gap between where runs exited and the optimal exit.

    The gap is ``tokens_think - optimal_tokens``; negative means the run
    stopped before the oracle's earliest correct point.
    """
    gaps: dict[str, list[int]] = {}
    missing: dict[str, int] = {}
    for rec in records:
        opt = optimal_exits.get(rec.question_id)
        if opt is None or opt.boundary is None:
            missing[rec.policy] = missing.get(rec.policy, 0) + 1
            gaps.setdefault(rec.policy, [])
            continue
        gaps.setdefault(rec.policy, []).append(rec.tokens_think - opt.optimal_tokens)
    out = []
    for policy, gs in gaps.items():
        n = len(gs)
        out.append(GapSummary(
            policy=policy,
            n=n,
            mean_gap=fmean(gs) if gs else 0.0,
            frac_before=sum(g < 0 for g in gs) / n if n else 0.0,
            frac_exact=sum(g == 0 for g in gs) / n if n else 0.0,
            frac_after=sum(g > 0 for g in gs) / n if n else 0.0,
            n_missing=missing.get(policy, 0),
        ))
    return out


def write_oracle_results(results: Mapping[str, OptimalExit], path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for sid, opt in results.items():
            f.write(json.dumps({"sample_id": sid, **opt.to_dict()}, sort_keys=True) + "\n")


def read_oracle_results(path) -> dict[str, OptimalExit]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        sid = d.pop("sample_id")
        b = d.pop("boundary")
        d["unknown"] = tuple(d.get("unknown", ()))
        out[sid] = OptimalExit(SentenceBoundary(**b) if b else None, **d)
    return out


def gap_csv(summaries: Sequence[GapSummary]) -> str:
    buf = io.StringIO()
    cols = ("policy", "n", "mean_gap", "frac_before", "frac_exact", "frac_after", "n_missing")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for s in summaries:
        w.writerow([getattr(s, c) for c in cols])
    return buf.getvalue()
