"""Build mock scripts for controlled reasoning runs.

The low-level mock matches prompts by prefix. Writing those prefixes by
hand for sufficiency checks, probes or forced conclusions is tedious, so
this module derives them from the same prompt renderers the controller
uses. Typical use::

    b = ScriptBuilder(config)
    r = b.reasoning(question, tokenize(text))
    b.check_replies(r, ["75", "100"])
    b.conclusion(r, tokenize("The answer is \\boxed{9}."))
    b.script.save("case.json")
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .backend.mock import Match, MockScript, ScriptEntry
from .backend.types import TokenChunk
from .controller import ControllerConfig
from .prompting import render_reasoning_prompt, render_sufficiency_prompt
from .signals import SignalMatcher, patterns_from_literals

ChunkLike = str | tuple[str, int] | TokenChunk


def tokenize(text: str) -> list[TokenChunk]:
    """Split text into one-token chunks of leading whitespace + word."""
    pieces = re.findall(r"\s*\S+|\s+$", text)
    return [TokenChunk(p, 1) for p in pieces]


def as_chunks(chunks: Iterable[ChunkLike]) -> list[TokenChunk]:
    out = []
    for c in chunks:
        if isinstance(c, TokenChunk):
            out.append(c)
        elif isinstance(c, str):
            out.append(TokenChunk(c, 1))
        else:
            out.append(TokenChunk(c[0], int(c[1])))
    return out


@dataclass
class Reasoning:
    question: str
    prompt: str
    chunks: list[TokenChunk]
    seed: int | None = None

    @property
    def text(self) -> str:
        return "".join(c.text for c in self.chunks)

    def trace_through(self, chunk_index: int) -> str:
        return "".join(c.text for c in self.chunks[: chunk_index + 1])

    def tokens_through(self, chunk_index: int) -> int:
        return sum(c.token_count for c in self.chunks[: chunk_index + 1])


class ScriptBuilder:
    def __init__(self, config: ControllerConfig | None = None, script: MockScript | None = None) -> None:
        self.cfg = config or ControllerConfig()
        self.fmt = self.cfg.chat_format
        self.script = script or MockScript()

    def _constraints(self, seed: int | None, require_bias: Sequence[int] = ()) -> dict:
        return {"seed": seed, "require_bias": tuple(require_bias)}

    def reasoning(
        self,
        question: str,
        chunks: Iterable[ChunkLike],
        *,
        seed: int | None = None,
        require_bias: Sequence[int] = (),
        nothinking: bool = False,
        name: str = "",
    ) -> Reasoning:
        """Main generation stream for ``question`` (resumable)."""
        prompt = render_reasoning_prompt(question, self.cfg.system, self.fmt, nothinking=nothinking)
        chunk_list = as_chunks(chunks)
        self.script.add(ScriptEntry(
            Match("prefix", prompt, resume=True, **self._constraints(seed, require_bias)),
            chunk_list,
            name=name or f"main:{question[:30]}",
        ))
        return Reasoning(question, prompt, chunk_list, seed)

    def think_chunk_count(self, r: Reasoning) -> int:
        """Number of chunks the controller treats as think phase."""
        text = ""
        for i, c in enumerate(r.chunks):
            text += c.text
            if self.fmt.think_close in text:
                return i
        return len(r.chunks)

    def detection_points(self, r: Reasoning) -> list[int]:
        """Chunk indices at which the controller's matcher reports signals (deduplicated)."""
        m = SignalMatcher(patterns_from_literals(self.cfg.signals))
        points: list[int] = []
        for i, c in enumerate(r.chunks[: self.think_chunk_count(r)]):
            if m.feed(c) and (not points or points[-1] != i):
                points.append(i)
        return points

    def _check_prefix(self, r: Reasoning, chunk_index: int) -> str:
        sentinel = "\x00"
        rendered = render_sufficiency_prompt(r.question, sentinel, self.fmt, self.cfg.template)
        head = rendered[: rendered.index(sentinel)]
        return head + self.fmt.think_open + r.trace_through(chunk_index)

    def check_reply_at(self, r: Reasoning, chunk_index: int, reply: str | Sequence[ChunkLike],
                       *, first_person: bool = False, name: str = "") -> ScriptEntry:
        chunks = tokenize(reply) if isinstance(reply, str) else as_chunks(reply)
        if first_person:
            match = Match("prefix", r.prompt + r.trace_through(chunk_index), suffix="Confidence:", seed=r.seed)
        else:
            match = Match("prefix", self._check_prefix(r, chunk_index), seed=r.seed)
        return self.script.add(ScriptEntry(match, chunks, name=name or f"check@{chunk_index}"))

    def check_replies(self, r: Reasoning, replies: Sequence[str], *, first_person: bool = False) -> list[int]:
        """Attach replies to the first ``len(replies)`` detection points; returns those chunk indices."""
        points = self.detection_points(r)
        if len(replies) > len(points):
            raise ValueError(f"{len(replies)} replies but only {len(points)} signal points")
        for p, reply in zip(points, replies):
            self.check_reply_at(r, p, reply, first_person=first_person)
        return points[: len(replies)]

    def conclusion(self, r: Reasoning, chunks: Iterable[ChunkLike], name: str = "") -> ScriptEntry:
        """Reply to any forced exit (prompt ending with the injected marker)."""
        marker = self.cfg.exit_prefix + self.fmt.think_close + self.cfg.exit_suffix
        return self.script.add(ScriptEntry(
            Match("prefix", r.prompt, suffix=marker, seed=r.seed),
            as_chunks(chunks),
            name=name or "conclusion",
        ))

    def conclusion_at(self, r: Reasoning, char_offset: int, chunks: Iterable[ChunkLike], name: str = "") -> ScriptEntry:
        """Reply to a forced exit whose trace is at least ``r.text[:char_offset]``."""
        marker = self.cfg.exit_prefix + self.fmt.think_close + self.cfg.exit_suffix
        return self.script.add(ScriptEntry(
            Match("prefix", r.prompt + r.text[:char_offset], suffix=marker, seed=r.seed),
            as_chunks(chunks),
            name=name or f"conclusion@{char_offset}",
        ))

    def probe_reply_at(self, r: Reasoning, chunk_index: int, reply: str) -> ScriptEntry:
        return self.script.add(ScriptEntry(
            Match("prefix", r.prompt + r.trace_through(chunk_index), suffix=self.cfg.probe_suffix, seed=r.seed),
            tokenize(reply),
            name=f"probe@{chunk_index}",
        ))

    def trial_reply_at(self, r: Reasoning, chunk_index: int, chunks: Sequence[ChunkLike]) -> ScriptEntry:
        return self.script.add(ScriptEntry(
            Match("prefix", r.prompt + r.trace_through(chunk_index), suffix=self.cfg.trial_suffix, seed=r.seed),
            as_chunks(chunks),
            name=f"trial@{chunk_index}",
        ))

    def forced_conclusion(self, question: str, trace_prefix: str, chunks: Iterable[ChunkLike] | str,
                          *, exact: bool = True, name: str = "") -> ScriptEntry:
        """Reply to ``question``'s prompt + ``trace_prefix`` + exit marker, as the oracle sends it."""
        prompt = render_reasoning_prompt(question, self.cfg.system, self.fmt)
        marker = self.cfg.exit_prefix + self.fmt.think_close + self.cfg.exit_suffix
        chunk_list = tokenize(chunks) if isinstance(chunks, str) else as_chunks(chunks)
        if exact:
            match = Match("exact", prompt + trace_prefix + marker)
        else:
            match = Match("prefix", prompt + trace_prefix, suffix=marker)
        return self.script.add(ScriptEntry(match, chunk_list, name=name or f"forced@{len(trace_prefix)}"))
