"""JSONL datasets: one ``{"id", "question", "answer", "kind"}`` object per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .grading import TASK_KINDS


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    gold_answer: str
    task_kind: str = "boxed_expression"


class DatasetError(ValueError):
    def __init__(self, path, problems: list[tuple[int, str]]) -> None:
        self.path = str(path)
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems)
        super().__init__(f"{self.path}: {lines}")


def _sample_from(obj, lineno: int, problems: list[tuple[int, str]]) -> Sample | None:
    if not isinstance(obj, dict):
        problems.append((lineno, "expected a JSON object"))
        return None
    sid, question = obj.get("id"), obj.get("question")
    kind = obj.get("kind", "boxed_expression")
    answer = obj.get("answer", "")
    bad = False
    if isinstance(sid, int) and not isinstance(sid, bool):
        sid = str(sid)
    if not isinstance(sid, str) or not sid:
        problems.append((lineno, "missing id"))
        bad = True
    if not isinstance(question, str) or not question.strip():
        problems.append((lineno, "missing question"))
        bad = True
    if kind not in TASK_KINDS:
        problems.append((lineno, f"unknown kind {kind!r}"))
        bad = True
    if isinstance(answer, (int, float)) and not isinstance(answer, bool):
        answer = str(answer)
    if not isinstance(answer, str):
        problems.append((lineno, "answer must be a string"))
        bad = True
    elif kind != "code" and not answer.strip():
        problems.append((lineno, f"missing answer for {kind} sample"))
        bad = True
    return None if bad else Sample(sid, question, answer, kind)


def load_dataset(path) -> list[Sample]:
    """Read and validate a dataset; all problems are reported together."""
    path = Path(path)
    problems: list[tuple[int, str]] = []
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        sample = _sample_from(obj, lineno, problems)
        if sample is None:
            continue
        if sample.id in seen:
            problems.append((lineno, f"duplicate id {sample.id!r} (first on line {seen[sample.id]})"))
            continue
        seen[sample.id] = lineno
        samples.append(sample)
    if problems:
        raise DatasetError(path, problems)
    if not samples:
        raise DatasetError(path, [(0, "dataset is empty")])
    return samples


def write_dataset(samples, path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(
                {"id": s.id, "question": s.question, "answer": s.gold_answer, "kind": s.task_kind},
                ensure_ascii=False,
            ) + "\n")
