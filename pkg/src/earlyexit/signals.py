"""Streaming detection of reflection signals in decoded model output.

Signals are literal discourse markers ("Wait", "But let me", ...). The
matcher consumes text incrementally and reports every occurrence exactly
once, no matter how the text was split into chunks.

Matching rules:

* case-sensitive literal comparison;
* a match must start at the beginning of the text or right after a
  whitespace character;
* a match must be followed by the end of the text or by a non-word
  character (whitespace, punctuation, symbols);
* at a given start position the longest literal wins, and matches never
  overlap (scanning resumes after the end of the previous hit).

Because of the right-boundary rule a literal that ends exactly at the end
of the text received so far is undecided: the next chunk may turn "Wait"
into "Waiting". Such tails stay in the carryover buffer until more text or
:meth:`SignalMatcher.finish` resolves them.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_SIGNAL_LITERALS: tuple[str, ...] = (
    "Wait",
    "Alternative",
    "Alternatively",
    "But wait",
    "But let me",
    "But let's",
)


class PatternError(ValueError):
    """Raised for an invalid signal pattern set."""


@dataclass(frozen=True)
class SignalPattern:
    id: int
    literal: str

    def __post_init__(self) -> None:
        if not self.literal:
            raise PatternError("signal literal must be non-empty")
        if self.literal != self.literal.strip():
            raise PatternError(f"signal literal has surrounding whitespace: {self.literal!r}")


@dataclass(frozen=True)
class SignalHit:
    pattern_id: int
    literal: str
    start_offset: int
    end_offset: int
    token_index: int


def default_patterns() -> list[SignalPattern]:
    return [SignalPattern(i, lit) for i, lit in enumerate(DEFAULT_SIGNAL_LITERALS)]


def patterns_from_literals(literals: Iterable[str]) -> list[SignalPattern]:
    return [SignalPattern(i, lit) for i, lit in enumerate(literals)]


def load_patterns(path: str | Path) -> list[SignalPattern]:
    """Load a pattern set from a JSON array of strings."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise PatternError(f"{path}: expected a JSON array of strings")
    return patterns_from_literals(data)


def _validate(patterns: Sequence[SignalPattern]) -> None:
    if not patterns:
        raise PatternError("pattern set is empty")
    seen: set[int] = set()
    for p in patterns:
        if p.id in seen:
            raise PatternError(f"duplicate pattern id {p.id}")
        seen.add(p.id)


@dataclass(frozen=True)
class _Compiled:
    id_of: dict[str, int]
    literals: list[str]
    max_len: int
    prefixes: frozenset[str]
    regex: re.Pattern


@functools.lru_cache(maxsize=64)
def _compile(patterns: tuple[SignalPattern, ...]) -> _Compiled:
    _validate(patterns)
    # longest first, so alternation order implements the longest-match rule
    ordered = sorted(patterns, key=lambda p: (-len(p.literal), p.id))
    id_of: dict[str, int] = {}
    for p in ordered:
        id_of.setdefault(p.literal, p.id)
    literals = list(id_of)
    alternation = "|".join(re.escape(lit) for lit in literals)
    return _Compiled(
        id_of=id_of,
        literals=literals,
        max_len=max(len(lit) for lit in literals),
        prefixes=frozenset(lit[:i] for lit in literals for i in range(1, len(lit) + 1)),
        regex=re.compile(rf"(?<!\S)(?:{alternation})(?!\w)"),
    )


class SignalMatcher:
    """Incremental matcher over a stream of decoded text chunks.

    One instance tracks one stream. It is not safe to feed the same
    instance from two threads at once.
    """

    def __init__(self, patterns: Sequence[SignalPattern] | None = None) -> None:
        patterns = tuple(default_patterns() if patterns is None else patterns)
        compiled = _compile(patterns)
        self.patterns = list(patterns)
        self._id_of = compiled.id_of
        self._literals = compiled.literals
        self._max_len = compiled.max_len
        self._prefixes = compiled.prefixes
        self._regex = compiled.regex
        self._buf = ""
        self._base = 0  # text offset of _buf[0]
        self._next = 0  # first undecided text offset
        self.chunks_consumed = 0
        self.tokens_consumed = 0

    @property
    def max_literal_length(self) -> int:
        return self._max_len

    @property
    def carryover(self) -> str:
        """Undecided tail of the text (at most the longest literal)."""
        return self._buf[self._next - self._base:]

    @property
    def chars_consumed(self) -> int:
        return self._next

    def feed(self, chunk) -> list[SignalHit]:
        """Consume one chunk (a ``TokenChunk`` or plain ``str``) and return new hits."""
        if isinstance(chunk, str):
            text, tokens = chunk, 1 if chunk else 0
        else:
            text, tokens = chunk.text, chunk.token_count
        index = self.chunks_consumed
        self.chunks_consumed += 1
        self.tokens_consumed += tokens
        if not text:
            return []
        self._buf += text
        return self._scan(index, final=False)

    def finish(self) -> list[SignalHit]:
        """Resolve the carryover at end of stream."""
        if self.carryover == "":
            return []
        return self._scan(max(self.chunks_consumed - 1, 0), final=True)

    def _pending_from(self) -> int:
        """Buffer index of the earliest position that may still become a hit."""
        buf = self._buf
        n = len(buf)
        lo = max(self._next - self._base, n - self._max_len)
        for q in range(lo, n):
            if q > 0 and not buf[q - 1].isspace():
                continue
            if q == 0 and self._base > 0:
                continue  # unreachable: the buffer always keeps one context char
            if buf[q:] in self._prefixes:
                return q
        return n

    def _scan(self, token_index: int, final: bool) -> list[SignalHit]:
        buf = self._buf
        start = self._next - self._base
        limit = len(buf) if final else self._pending_from()
        if limit <= start:
            return []  # everything new is still undecided; buffer already trimmed
        hits: list[SignalHit] = []
        resume = start
        for m in self._regex.finditer(buf, start):
            if m.start() >= limit:
                break
            lit = m.group(0)
            hits.append(
                SignalHit(
                    pattern_id=self._id_of[lit],
                    literal=lit,
                    start_offset=self._base + m.start(),
                    end_offset=self._base + m.end(),
                    token_index=token_index,
                )
            )
            resume = m.end()
        new_next = max(resume, limit)
        self._next = self._base + new_next
        # keep one character of left context for the whitespace check
        keep_from = max(new_next - 1, 0)
        self._buf = buf[keep_from:]
        self._base += keep_from
        return hits


def scan_text(text: str, patterns: Sequence[SignalPattern] | None = None) -> list[SignalHit]:
    """One-shot scan of a complete text."""
    m = SignalMatcher(patterns)
    return m.feed(text) + m.finish()
