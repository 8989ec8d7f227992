"""Deterministic scripted completion backend.

A script is a list of entries. Each entry pairs a prompt predicate with a
list of response chunks. Predicates:

``{"exact": s}``
    prompt equals ``s``.
``{"prefix": s, "suffix": t, "resume": bool}``
    prompt starts with ``s`` (and ends with ``t`` when given). With
    ``resume`` the part of the prompt after ``s`` must be a chunk-aligned
    prefix of the entry's own response; generation then continues from
    there. This is how a controller that re-issues ``prompt + output so
    far`` picks up where the stream stopped.
``{"contains": s}``
    prompt contains ``s``.

Any predicate may add ``"seed": n`` (request seed must equal ``n``) and
``"require_bias": [ids]`` (each id must carry a negative logit bias).

When several entries match, exact beats prefix beats contains; within a
kind the longest literal (prefix + suffix) wins, then the entry with more
constraints. A remaining tie is an ambiguity error.

Response chunks are strings (one token each) or objects
``{"text": ..., "tokens": n, "logprobs": [...]}``. Entries may set
``delay_per_chunk`` (seconds on the backend clock, virtual by default) and
``fail_after`` (raise a stream interruption after that many chunks).
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .base import Backend, cut_at_stop
from .types import (
    BackendCapabilities,
    CompletionRequest,
    NoScriptMatch,
    StreamInterrupted,
    TokenChunk,
    Usage,
    VirtualClock,
)


class ScriptError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Match:
    kind: str  # exact | prefix | contains
    text: str
    suffix: str = ""
    resume: bool = False
    seed: int | None = None
    require_bias: tuple[int, ...] = ()

    def key(self) -> tuple:
        return (self.kind, self.text, self.suffix, self.resume, self.seed, self.require_bias)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {self.kind: self.text}
        if self.suffix:
            out["suffix"] = self.suffix
        if self.resume:
            out["resume"] = True
        if self.seed is not None:
            out["seed"] = self.seed
        if self.require_bias:
            out["require_bias"] = list(self.require_bias)
        return out


@dataclass
class ScriptEntry:
    match: Match
    response: list[TokenChunk]
    delay_per_chunk: float = 0.0
    fail_after: int | None = None
    name: str = ""

    @property
    def response_text(self) -> str:
        return "".join(c.text for c in self.response)

    def to_json(self) -> dict[str, Any]:
        chunks: list[Any] = []
        for c in self.response:
            if c.token_count == 1 and c.logprobs is None:
                chunks.append(c.text)
            else:
                d: dict[str, Any] = {"text": c.text, "tokens": c.token_count}
                if c.logprobs is not None:
                    d["logprobs"] = list(c.logprobs)
                chunks.append(d)
        out: dict[str, Any] = {"match": self.match.to_json(), "response": chunks}
        if self.name:
            out["name"] = self.name
        if self.delay_per_chunk:
            out["delay_per_chunk"] = self.delay_per_chunk
        if self.fail_after is not None:
            out["fail_after"] = self.fail_after
        return out


@dataclass
class MockScript:
    entries: list[ScriptEntry] = field(default_factory=list)

    def add(self, entry: ScriptEntry) -> ScriptEntry:
        self.entries.append(entry)
        return entry

    def validate(self) -> None:
        seen: dict[tuple, int] = {}
        for i, e in enumerate(self.entries):
            k = e.match.key()
            if k in seen:
                raise ScriptError(f"entry {i} duplicates the predicate of entry {seen[k]}")
            seen[k] = i

    def to_json(self) -> dict[str, Any]:
        return {"entries": [e.to_json() for e in self.entries]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _parse_chunk(raw: Any) -> TokenChunk:
    if isinstance(raw, str):
        return TokenChunk(raw, 1)
    if not isinstance(raw, dict) or not isinstance(raw.get("text"), str):
        raise ValueError(f"bad response chunk {raw!r}")
    logprobs = raw.get("logprobs")
    tokens = raw.get("tokens", len(logprobs) if logprobs is not None else 1)
    return TokenChunk(raw["text"], int(tokens), tuple(logprobs) if logprobs is not None else None)


def _parse_match(raw: Any) -> Match:
    if not isinstance(raw, dict):
        raise ValueError("match must be an object")
    kinds = [k for k in ("exact", "prefix", "contains") if k in raw]
    if len(kinds) != 1:
        raise ValueError("match needs exactly one of exact / prefix / contains")
    kind = kinds[0]
    text = raw[kind]
    if not isinstance(text, str):
        raise ValueError(f"{kind} must be a string")
    if kind == "contains" and not text:
        raise ValueError("contains marker must be non-empty")
    if kind != "prefix" and ("suffix" in raw or raw.get("resume")):
        raise ValueError("suffix/resume only apply to prefix matches")
    seed = raw.get("seed")
    return Match(
        kind=kind,
        text=text,
        suffix=raw.get("suffix", ""),
        resume=bool(raw.get("resume", False)),
        seed=int(seed) if seed is not None else None,
        require_bias=tuple(int(x) for x in raw.get("require_bias", ())),
    )


def _entry_lines(text: str) -> list[int]:
    """1-based line numbers where each element of the entries array starts."""
    m = re.search(r'"entries"\s*:\s*\[', text) or re.match(r"\s*\[", text)
    if not m:
        return []
    decoder = json.JSONDecoder()
    idx = m.end()
    lines = []
    while True:
        while idx < len(text) and text[idx] in " \t\r\n,":
            idx += 1
        if idx >= len(text) or text[idx] == "]":
            return lines
        lines.append(text.count("\n", 0, idx) + 1)
        try:
            _, idx = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            return lines


def parse_script(text: str) -> MockScript:
    if not text.strip():
        raise ScriptError("script is empty", 1)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptError(exc.msg, exc.lineno) from exc
    raw_entries = data["entries"] if isinstance(data, dict) and "entries" in data else data
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ScriptError("script has no entries", 1)
    lines = _entry_lines(text)
    script = MockScript()
    seen: dict[tuple, int] = {}
    for i, raw in enumerate(raw_entries):
        line = lines[i] if i < len(lines) else None
        try:
            if not isinstance(raw, dict):
                raise ValueError("entry must be an object")
            match = _parse_match(raw.get("match"))
            response = [_parse_chunk(c) for c in raw.get("response", [])]
            fail_after = raw.get("fail_after")
            entry = ScriptEntry(
                match=match,
                response=response,
                delay_per_chunk=float(raw.get("delay_per_chunk", 0.0)),
                fail_after=int(fail_after) if fail_after is not None else None,
                name=str(raw.get("name", "")),
            )
        except (ValueError, TypeError) as exc:
            raise ScriptError(f"entry {i}: {exc}", line) from exc
        k = match.key()
        if k in seen:
            raise ScriptError(f"entry {i} duplicates the predicate of entry {seen[k]}", line)
        seen[k] = i
        script.add(entry)
    return script


def load_script(path: str | Path) -> MockScript:
    return parse_script(Path(path).read_text(encoding="utf-8"))


def _split_chunk(chunk: TokenChunk, keep_tokens: int) -> TokenChunk:
    """First ``keep_tokens`` tokens of a multi-token chunk (text split evenly)."""
    n = chunk.token_count
    cut = round(len(chunk.text) * keep_tokens / n) if n else 0
    lps = chunk.logprobs[:keep_tokens] if chunk.logprobs is not None else None
    return TokenChunk(chunk.text[:cut], keep_tokens, lps)


def _prompt_tokens(prompt: str) -> int:
    return len(prompt.split())


class MockBackend(Backend):
    """Backend that replays a :class:`MockScript`.

    Every request is logged in ``calls`` as ``(request, usage)`` once its
    stream is finished or closed.
    """

    def __init__(self, script: MockScript, *, clock=None, max_in_flight: int = 64,
                 capabilities: BackendCapabilities | None = None) -> None:
        super().__init__(max_in_flight=max_in_flight, clock=clock or VirtualClock())
        script.validate()
        self.script = script
        self._caps = capabilities or BackendCapabilities(True, True, True)
        self._lock = threading.Lock()
        self.calls: list[tuple[CompletionRequest, Usage]] = []

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> MockBackend:
        return cls(load_script(path), **kwargs)

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def total_usage(self) -> int:
        with self._lock:
            return sum(u.completion_tokens for _, u in self.calls)

    def resolve(self, request: CompletionRequest) -> tuple[ScriptEntry, int]:
        """Find the entry for a request; returns (entry, first chunk index)."""
        prompt = request.prompt
        best: list[tuple[tuple, ScriptEntry, int]] = []
        for entry in self.script.entries:
            m = entry.match
            if m.seed is not None and request.seed != m.seed:
                continue
            if m.require_bias:
                bias = request.logit_bias or {}
                if not all(bias.get(t, 0.0) < 0 for t in m.require_bias):
                    continue
            start = 0
            if m.kind == "exact":
                if prompt != m.text:
                    continue
                rank = (3, len(m.text))
            elif m.kind == "contains":
                if m.text not in prompt:
                    continue
                rank = (1, len(m.text))
            else:
                if not prompt.startswith(m.text):
                    continue
                if len(prompt) < len(m.text) + len(m.suffix) or not prompt.endswith(m.suffix):
                    continue
                if m.resume:
                    start = self._resume_index(entry, prompt[len(m.text):])
                    if start is None:
                        continue
                rank = (2, len(m.text) + len(m.suffix))
            constraints = (m.seed is not None) + len(m.require_bias)
            best.append((rank + (constraints,), entry, start))
        if not best:
            raise NoScriptMatch(f"no script entry matches prompt ending {prompt[-80:]!r}")
        best.sort(key=lambda t: t[0], reverse=True)
        if len(best) > 1 and best[0][0] == best[1][0]:
            raise NoScriptMatch(
                f"ambiguous script entries {best[0][1].name!r} and {best[1][1].name!r}"
            )
        return best[0][1], best[0][2]

    @staticmethod
    def _resume_index(entry: ScriptEntry, remainder: str) -> int | None:
        if not remainder:
            return 0
        pos = 0
        for i, c in enumerate(entry.response):
            if pos == len(remainder):
                return i
            nxt = pos + len(c.text)
            if remainder[pos:nxt] != c.text:
                return None
            pos = nxt
        return len(entry.response) if pos == len(remainder) else None

    def _plan(self, request: CompletionRequest, entry: ScriptEntry, start: int) -> list[TokenChunk]:
        """Chunks to emit, with truncation, stop handling and finish reason applied."""
        out: list[TokenChunk] = []
        budget = request.max_tokens
        text_so_far = ""
        finish = "eos"
        for chunk in entry.response[start:]:
            if budget <= 0:
                finish = "length"
                break
            if chunk.token_count > budget:
                chunk = _split_chunk(chunk, budget)
                finish = "length"
            if request.stop:
                cut, stopped = cut_at_stop(text_so_far + chunk.text, request.stop)
                if stopped:
                    keep = max(len(cut) - len(text_so_far), 0)
                    out.append(TokenChunk(chunk.text[:keep], chunk.token_count, chunk.logprobs))
                    finish = "stop"
                    break
            out.append(chunk)
            text_so_far += chunk.text
            budget -= chunk.token_count
            if finish == "length":
                break
        if finish == "eos" and budget <= 0 and len(entry.response) > start + len(out):
            finish = "length"
        if not out:
            out.append(TokenChunk("", 0))
        final = []
        for i, c in enumerate(out):
            lps = c.logprobs
            if request.want_logprobs and lps is None:
                lps = (0.0,) * c.token_count
            if not request.want_logprobs:
                lps = None
            final.append(TokenChunk(c.text, c.token_count, lps, finish if i == len(out) - 1 else None))
        return final

    def _open_stream(self, request: CompletionRequest) -> tuple[Iterator[TokenChunk], int]:
        entry, start = self.resolve(request)
        plan = self._plan(request, entry, start)
        prompt_tokens = _prompt_tokens(request.prompt)
        return self._emit(request, entry, plan, prompt_tokens), prompt_tokens

    def _emit(self, request, entry: ScriptEntry, plan: list[TokenChunk], prompt_tokens: int):
        emitted = 0
        try:
            for i, chunk in enumerate(plan):
                if entry.fail_after is not None and i >= entry.fail_after:
                    raise StreamInterrupted(f"scripted stream failure after {i} chunks")
                self.clock.sleep(entry.delay_per_chunk)
                emitted += chunk.token_count
                yield chunk
        finally:
            with self._lock:
                self.calls.append((request, Usage(prompt_tokens, emitted)))
