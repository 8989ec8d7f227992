"""Early-exit control of a reasoning model's think phase.

The main entry point is :func:`run`. It streams the model's reasoning,
watches for reflection signals and, depending on the exit policy, pauses to
ask whether the reasoning so far already suffices. On a sufficient verdict
the think-close marker is injected and the model writes its conclusion.

Counter semantics of the sufficiency policy: ``c`` grows with every think
token from the start of the run, a signal triggers a check only when
``c >= k``, and ``c`` is reset only after a check that did not end the
run. Skipped signals leave ``c`` untouched, so the first check can never
happen before token ``k``.

After a check that says "continue", generation is re-issued with prompt +
trace so far. The trace is never truncated.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .backend.base import Backend
from .backend.types import BackendError, CapabilityError, CompletionRequest, CompletionStream
from .harness.grading import extract_answer, find_closing_brace
from .prompting import (
    DEFAULT_SYSTEM,
    ChatFormat,
    PromptTemplate,
    UnparseableScore,
    parse_confidence,
    render_first_person_prompt,
    render_reasoning_prompt,
    render_sufficiency_prompt,
)
from .signals import DEFAULT_SIGNAL_LITERALS, SignalHit, SignalMatcher, patterns_from_literals

logger = logging.getLogger(__name__)

VARIANTS = (
    "vanilla",
    "dtsr",
    "dtsr_first_person",
    "no_thinking",
    "budget_force",
    "answer_probe",
    "entropy_exit",
    "nowait",
)
ENTROPY_MODES = ("deer", "deer1", "deer2")
EXIT_KINDS = ("natural", "early_exit", "budget_forced", "no_think")

DEFAULT_PROBE_SUFFIX = (
    "\n\n... Oh, I suddenly got the answer to the whole problem, **Final Answer**\n\n\\[ \\boxed{"
)
DEFAULT_TRIAL_SUFFIX = "\n\n**Final Answer**\n\\boxed{"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ExitPolicy:
    variant: str = "dtsr"
    interval: int = 256  # answer_probe
    window: int = 3  # answer_probe
    mode: str = "deer"  # entropy_exit
    conf_threshold: float = 0.95  # entropy_exit
    banned_words: tuple[tuple[str, tuple[int, ...]], ...] = ()  # nowait

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise PolicyError(f"unknown policy variant {self.variant!r}")
        if self.interval < 1:
            raise PolicyError("answer_probe interval must be >= 1")
        if self.window < 2:
            raise PolicyError("answer_probe window must be >= 2")
        if self.mode not in ENTROPY_MODES:
            raise PolicyError(f"entropy_exit mode must be one of {ENTROPY_MODES}")
        if not 0 < self.conf_threshold <= 1:
            raise PolicyError("entropy_exit conf_threshold must be in (0, 1]")
        if isinstance(self.banned_words, dict):
            object.__setattr__(
                self, "banned_words",
                tuple((w, tuple(ids)) for w, ids in self.banned_words.items()),
            )

    @property
    def name(self) -> str:
        if self.variant == "entropy_exit":
            return self.mode
        return self.variant

    @property
    def forces_at_budget(self) -> bool:
        return self.variant not in ("vanilla", "nowait", "no_thinking")

    def banned_token_ids(self) -> list[int]:
        return sorted({i for _, ids in self.banned_words for i in ids})

    @classmethod
    def parse(cls, text: str) -> ExitPolicy:
        """Parse ``variant[:key=value,...]``; ``deer``/``deer1``/``deer2`` are shorthands.

        nowait takes ``banned=Wait/13/14|Hmm/22``: words with their token ids.
        """
        name, _, rest = text.partition(":")
        kwargs: dict[str, Any] = {}
        if name in ENTROPY_MODES:
            kwargs["mode"] = name
            name = "entropy_exit"
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            if key in ("interval", "window"):
                kwargs[key] = int(value)
            elif key == "conf_threshold":
                kwargs[key] = float(value)
            elif key == "mode":
                kwargs[key] = value
            elif key == "banned":
                kwargs["banned_words"] = _parse_banned(value)
            else:
                raise PolicyError(f"unknown policy option {key!r}")
        return cls(variant=name, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["banned_words"] = {w: list(ids) for w, ids in self.banned_words}
        return d


def _parse_banned(value: str) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {}
    for group in filter(None, value.split("|")):
        word, *ids = group.split("/")
        try:
            out[word] = tuple(int(i) for i in ids)
        except ValueError as exc:
            raise PolicyError(f"bad token id in banned group {group!r}") from exc
        if not word or not ids:
            raise PolicyError(f"banned group {group!r} needs a word and at least one token id")
    return out


@dataclass(frozen=True)
class ControllerConfig:
    tau: float = 100.0
    k: int = 64
    max_len: int = 16384
    conclusion_reserve: int = 512
    check_max_tokens: int = 16
    check_temperature: float = 0.0
    check_retries: int = 1
    temperature: float = 0.6
    top_p: float = 0.95
    seeds: int = 3
    system: str | None = DEFAULT_SYSTEM
    chat_format: ChatFormat = field(default_factory=ChatFormat)
    template: PromptTemplate = field(default_factory=PromptTemplate)
    signals: tuple[str, ...] = DEFAULT_SIGNAL_LITERALS
    probe_suffix: str = DEFAULT_PROBE_SUFFIX
    probe_max_tokens: int = 32
    trial_suffix: str = DEFAULT_TRIAL_SUFFIX
    trial_max_tokens: int = 32
    exit_prefix: str = "\n"
    exit_suffix: str = "\n\n"
    nowait_bias: float = -100.0
    task_kind: str = "boxed_expression"

    def __post_init__(self) -> None:
        if not 0 <= self.tau <= 101:
            raise ValueError("tau must be within [0, 100] (101 disables exits)")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0 <= self.conclusion_reserve < self.max_len:
            raise ValueError("conclusion_reserve must be in [0, max_len)")
        if self.check_max_tokens < 1 or self.seeds < 1:
            raise ValueError("check_max_tokens and seeds must be >= 1")

    def with_overrides(self, **changes: Any) -> ControllerConfig:
        return replace(self, **changes)


@dataclass
class CheckEvent:
    kind: str  # sufficiency | probe | trial
    trace_token_position: int
    decision: str  # exit | continue
    signal: SignalHit | None = None
    score: float | None = None  # None: unparseable or failed
    raw: str = ""
    check_tokens_used: int = 0
    check_latency: float = 0.0
    answer: str | None = None
    confidence: float | None = None
    close_followed: bool | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CheckEvent:
        d = dict(d)
        if d.get("signal") is not None:
            d["signal"] = SignalHit(**d["signal"])
        return cls(**d)


@dataclass
class RunRecord:
    question_id: str
    policy: str
    question: str = ""
    trace: str = ""
    exit_marker: str = ""
    conclusion: str = ""
    exit_kind: str = "natural"
    check_events: list[CheckEvent] = field(default_factory=list)
    tokens_main: int = 0
    tokens_think: int = 0
    tokens_check_overhead: int = 0
    wall_latency: float = 0.0
    answer: str = ""
    skipped_signals: int = 0
    truncated: bool = False
    seed: int | None = None
    trace_offsets: list[tuple[int, int]] = field(default_factory=list)
    error: str | None = None

    @property
    def tokens_conclusion(self) -> int:
        return self.tokens_main - self.tokens_think

    @property
    def output(self) -> str:
        """Everything the model produced after the prompt, including an injected marker."""
        return self.trace + self.exit_marker + self.conclusion

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["check_events"] = [e.to_dict() for e in self.check_events]
        d["trace_offsets"] = [list(p) for p in self.trace_offsets]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunRecord:
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        d["check_events"] = [CheckEvent.from_dict(e) for e in d.get("check_events", [])]
        d["trace_offsets"] = [tuple(p) for p in d.get("trace_offsets", [])]
        return cls(**d)


class RunFailed(RuntimeError):
    """A backend error aborted the run; ``record`` holds what was produced so far."""

    def __init__(self, message: str, record: RunRecord) -> None:
        super().__init__(message)
        self.record = record


def force_exit(trace: str, fmt: ChatFormat | None = None, prefix: str = "\n", suffix: str = "\n\n") -> str:
    fmt = fmt or ChatFormat()
    if trace.rstrip().endswith(fmt.think_close):
        raise ValueError("trace already ends with the think-close marker")
    return trace + prefix + fmt.think_close + suffix


EventSink = Callable[[str, str], None]


def _held_back(text: str, marker: str) -> int:
    """Length of the longest suffix of ``text`` that is a proper prefix of ``marker``."""
    for n in range(min(len(marker) - 1, len(text)), 0, -1):
        if marker.startswith(text[-n:]):
            return n
    return 0


class _Session:
    def __init__(
        self,
        question: str,
        policy: ExitPolicy,
        config: ControllerConfig,
        backend: Backend,
        check_backend: Backend,
        question_id: str,
        seed: int | None,
        on_event: EventSink | None,
        history: Sequence[tuple[str, str]] = (),
    ) -> None:
        self.question = question
        self.policy = policy
        self.cfg = config
        self.fmt = config.chat_format
        self.backend = backend
        self.check_backend = check_backend
        self.seed = seed
        self.on_event = on_event
        self.prompt = render_reasoning_prompt(
            question, config.system, self.fmt, nothinking=policy.variant == "no_thinking",
            history=history,
        )
        self.rec = RunRecord(question_id=question_id, policy=policy.name, question=question, seed=seed)
        self.matcher = SignalMatcher(patterns_from_literals(config.signals))
        self.counter = 0
        self._emitted_think = 0
        self.bias: dict[int, float] | None = None
        if policy.variant == "nowait" and policy.banned_token_ids():
            self.bias = {i: config.nowait_bias for i in policy.banned_token_ids()}

    # -- helpers ---------------------------------------------------------

    def emit(self, kind: str, text: str) -> None:
        if self.on_event is not None and text:
            self.on_event(kind, text)

    def flush_think(self, final: bool) -> None:
        trace = self.rec.trace
        end = len(trace) if final else len(trace) - _held_back(trace, self.fmt.think_close)
        if end > self._emitted_think:
            self.emit("think", trace[self._emitted_think:end])
            self._emitted_think = end

    def main_request(self, prompt: str, max_tokens: int) -> CompletionRequest:
        return CompletionRequest(
            prompt=prompt,
            max_tokens=max(max_tokens, 1),
            temperature=self.cfg.temperature,
            top_p=self.cfg.top_p,
            logit_bias=self.bias,
            stream=True,
            seed=self.seed,
        )

    def side_request(self, prompt: str, max_tokens: int, stop=(), logprobs: bool = False) -> CompletionRequest:
        return CompletionRequest(
            prompt=prompt,
            max_tokens=max_tokens,
            temperature=self.cfg.check_temperature,
            top_p=1.0,
            stop=tuple(stop),
            want_logprobs=logprobs,
            stream=False,
            seed=self.seed,
        )

    def side_complete(self, request: CompletionRequest, retries: int):
        """Complete a side request; every attempt's tokens are charged as overhead."""
        attempt = 0
        while True:
            try:
                comp = self.check_backend.complete(request)
            except CapabilityError:
                raise
            except BackendError as exc:
                self.rec.tokens_check_overhead += sum(c.token_count for c in exc.partial)
                if attempt >= retries:
                    raise
                attempt += 1
                continue
            self.rec.tokens_check_overhead += comp.usage.completion_tokens
            return comp

    # -- think phase -----------------------------------------------------

    def think(self, hook: Callable[[list[SignalHit]], str | None] | None) -> str:
        """Stream the think phase. Returns natural | exit | budget | eos | length.

        ``hook`` runs after every think chunk with the signal hits it
        completed and answers None, "reissue" or "exit".
        """
        rec, cfg, close = self.rec, self.cfg, self.fmt.think_close
        forcing = self.policy.forces_at_budget
        budget = cfg.max_len - cfg.conclusion_reserve if forcing else cfg.max_len
        at_budget = "budget" if forcing else "length"
        while True:
            if rec.tokens_think >= budget:
                return at_budget
            stream = self.backend.stream_complete(
                self.main_request(self.prompt + rec.trace, cfg.max_len - rec.tokens_main)
            )
            reissue = False
            try:
                for chunk in stream:
                    rec.tokens_main += chunk.token_count
                    rec.tokens_think += chunk.token_count
                    self.counter += chunk.token_count
                    before = len(rec.trace)
                    combined = rec.trace + chunk.text
                    idx = combined.find(close, max(before - len(close) + 1, 0))
                    if idx != -1:
                        rec.trace = combined[:idx]
                        rec.trace_offsets.append((len(rec.trace), rec.tokens_think))
                        rec.exit_marker = close
                        self.flush_think(final=True)
                        self.emit("marker", close)
                        rec.conclusion = combined[idx + len(close):]
                        self.emit("answer", rec.conclusion)
                        self.finish_conclusion_stream(stream)
                        return "natural"
                    rec.trace = combined
                    rec.trace_offsets.append((len(rec.trace), rec.tokens_think))
                    self.flush_think(final=False)
                    hits = self.matcher.feed(chunk)
                    if hook is not None:
                        action = hook(hits)
                        if action == "exit":
                            return "exit"
                        if action == "reissue":
                            reissue = True
                            break
                    if rec.tokens_think >= budget:
                        return at_budget
                if reissue:
                    continue
                if stream.finish_reason == "length":
                    return "length" if rec.tokens_main >= cfg.max_len or not forcing else "budget"
                return "eos"
            finally:
                stream.close()

    def finish_conclusion_stream(self, stream: CompletionStream) -> None:
        for chunk in stream:
            self.rec.tokens_main += chunk.token_count
            self.rec.conclusion += chunk.text
            self.emit("answer", chunk.text)
        if stream.finish_reason == "length":
            self.rec.truncated = True

    def conclude(self) -> None:
        """Inject the exit marker and stream the conclusion."""
        rec, cfg = self.rec, self.cfg
        self.flush_think(final=True)
        forced = force_exit(rec.trace, self.fmt, cfg.exit_prefix, cfg.exit_suffix)
        rec.exit_marker = forced[len(rec.trace):]
        self.emit("marker", rec.exit_marker)
        remaining = cfg.max_len - rec.tokens_main
        if remaining < 1:
            rec.truncated = True
            return
        stream = self.backend.stream_complete(self.main_request(self.prompt + forced, remaining))
        try:
            self.finish_conclusion_stream(stream)
        finally:
            stream.close()

    # -- checks ----------------------------------------------------------

    def sufficiency_check(self, hit: SignalHit, first_person: bool) -> CheckEvent:
        cfg, rec = self.cfg, self.rec
        thought = self.fmt.think_open + rec.trace
        if first_person:
            prompt = render_first_person_prompt(self.question, thought, self.fmt, cfg.system)
        else:
            prompt = render_sufficiency_prompt(self.question, thought, self.fmt, cfg.template)
        req = self.side_request(prompt, cfg.check_max_tokens, stop=("\n",))
        clock = self.check_backend.clock
        t0 = clock.now()
        spent0 = rec.tokens_check_overhead
        event = CheckEvent("sufficiency", rec.tokens_think, "continue", signal=hit)
        try:
            comp = self.side_complete(req, cfg.check_retries)
            event.raw = comp.text
            score = parse_confidence(comp.text)
            event.score = score.value
            if score.value >= cfg.tau:
                event.decision = "exit"
        except UnparseableScore as exc:
            logger.info("unparseable sufficiency reply %r; continuing", exc.raw)
            event.error = "unparseable"
        except CapabilityError:
            raise
        except BackendError as exc:
            logger.warning("sufficiency check failed: %s; continuing", exc)
            event.error = f"backend: {exc}"
        event.check_tokens_used = rec.tokens_check_overhead - spent0
        event.check_latency = clock.now() - t0
        rec.check_events.append(event)
        return event

    def dtsr_hook(self, first_person: bool):
        def hook(hits: list[SignalHit]) -> str | None:
            action = None
            for hit in hits:
                if self.counter < self.cfg.k:
                    self.rec.skipped_signals += 1
                    continue
                event = self.sufficiency_check(hit, first_person)
                if event.decision == "exit":
                    return "exit"
                self.counter = 0
                action = "reissue"
            return action

        return hook

    def probe_hook_factory(self):
        state = {"next": self.policy.interval, "answers": []}

        def on_chunk(_hits: list[SignalHit]) -> str | None:
            rec = self.rec
            if rec.tokens_think < state["next"]:
                return None
            while state["next"] <= rec.tokens_think:
                state["next"] += self.policy.interval
            prompt = self.prompt + rec.trace + self.cfg.probe_suffix
            req = self.side_request(prompt, self.cfg.probe_max_tokens)
            clock = self.check_backend.clock
            t0 = clock.now()
            spent0 = rec.tokens_check_overhead
            event = CheckEvent("probe", rec.tokens_think, "continue")
            try:
                comp = self.side_complete(req, 0)
                event.raw = comp.text
                end = find_closing_brace(comp.text)
                event.answer = comp.text[:end].strip() if end != -1 else ""
                state["answers"].append(event.answer)
                last = state["answers"][-self.policy.window:]
                if len(last) == self.policy.window and last[0] and all(a == last[0] for a in last):
                    event.decision = "exit"
            except CapabilityError:
                raise
            except BackendError as exc:
                event.error = f"backend: {exc}"
            event.check_tokens_used = rec.tokens_check_overhead - spent0
            event.check_latency = clock.now() - t0
            rec.check_events.append(event)
            return "exit" if event.decision == "exit" else "reissue"

        return on_chunk

    def trial_check(self, hit: SignalHit) -> CheckEvent:
        cfg, rec, mode = self.cfg, self.rec, self.policy.mode
        prompt = self.prompt + rec.trace + cfg.trial_suffix
        req = self.side_request(prompt, cfg.trial_max_tokens, logprobs=mode != "deer2")
        clock = self.check_backend.clock
        t0 = clock.now()
        spent0 = rec.tokens_check_overhead
        event = CheckEvent("trial", rec.tokens_think, "continue", signal=hit)
        try:
            comp = self.side_complete(req, 0)
            event.raw = comp.text
            end = find_closing_brace(comp.text)
            event.answer = comp.text[:end].strip() if end != -1 else ""
            event.confidence = answer_confidence(comp.chunks, end) if mode != "deer2" else None
            tail = comp.text[end + 1:] if end != -1 else ""
            event.close_followed = end != -1 and tail.lstrip(" \t\r\n$\\]).*").startswith(
                self.fmt.think_close
            )
            confident = event.confidence is not None and event.confidence >= self.policy.conf_threshold
            if mode == "deer1":
                ok = confident
            elif mode == "deer2":
                ok = event.close_followed
            else:
                ok = confident and event.close_followed
            if ok and event.answer:
                event.decision = "exit"
        except CapabilityError:
            raise
        except BackendError as exc:
            event.error = f"backend: {exc}"
        event.check_tokens_used = rec.tokens_check_overhead - spent0
        event.check_latency = clock.now() - t0
        rec.check_events.append(event)
        return event

    def trial_hook(self, hits: list[SignalHit]) -> str | None:
        action = None
        for hit in hits:
            if self.trial_check(hit).decision == "exit":
                return "exit"
            action = "reissue"
        return action

    # -- dispatch --------------------------------------------------------

    def execute(self) -> None:
        variant = self.policy.variant
        rec = self.rec
        if variant == "no_thinking":
            rec.exit_kind = "no_think"
            stream = self.backend.stream_complete(self.main_request(self.prompt, self.cfg.max_len))
            try:
                self.finish_conclusion_stream(stream)
            finally:
                stream.close()
            return
        if variant == "entropy_exit" and self.policy.mode != "deer2":
            if not self.check_backend.capabilities().supports_logprobs:
                raise CapabilityError(f"{self.policy.mode} needs a backend with logprobs")
        if variant == "nowait" and self.bias:
            if not self.backend.capabilities().supports_logit_bias:
                raise CapabilityError("nowait needs a backend with logit_bias")

        if variant in ("dtsr", "dtsr_first_person"):
            outcome = self.think(self.dtsr_hook(first_person=variant == "dtsr_first_person"))
        elif variant == "answer_probe":
            outcome = self.think(self.probe_hook_factory())
        elif variant == "entropy_exit":
            outcome = self.think(self.trial_hook)
        else:
            outcome = self.think(None)

        if outcome == "natural":
            rec.exit_kind = "natural"
        elif outcome == "exit":
            rec.exit_kind = "early_exit"
            self.conclude()
        elif outcome == "budget":
            rec.exit_kind = "budget_forced"
            self.conclude()
        else:  # stream ended without closing the think phase
            rec.exit_kind = "natural"
            rec.truncated = outcome == "length"
            self.flush_think(final=True)


def answer_confidence(chunks, answer_end: int) -> float:
    """exp(mean logprob) over the tokens of chunks starting before ``answer_end``.

    Stand-in for an entropy-based confidence: 1.0 when every answer token
    had probability one.
    """
    if answer_end <= 0:
        return 0.0
    lps: list[float] = []
    pos = 0
    for c in chunks:
        if pos >= answer_end:
            break
        lps.extend(c.logprobs or ())
        pos += len(c.text)
    if not lps:
        return 0.0
    return math.exp(sum(lps) / len(lps))


def run(
    question: str,
    policy: ExitPolicy | str = "dtsr",
    config: ControllerConfig | None = None,
    backend: Backend | None = None,
    check_backend: Backend | None = None,
    *,
    question_id: str = "q",
    seed: int | None = None,
    on_event: EventSink | None = None,
    history: Sequence[tuple[str, str]] = (),
) -> RunRecord:
    """Run one question under an exit policy and return the accounted record.

    ``on_event(kind, text)`` receives the output as it is produced, with
    kind one of ``think``, ``marker``, ``answer``. ``history`` carries
    earlier chat turns for multi-turn prompts.
    """
    if backend is None:
        raise ValueError("a backend is required")
    if isinstance(policy, str):
        policy = ExitPolicy.parse(policy)
    config = config or ControllerConfig()
    check_backend = check_backend or backend
    session = _Session(
        question, policy, config, backend, check_backend, question_id, seed, on_event, history
    )
    clock = backend.clock
    t0 = clock.now()
    try:
        session.execute()
    except BackendError as exc:
        session.rec.error = f"{type(exc).__name__}: {exc}"
        session.rec.wall_latency = clock.now() - t0
        raise RunFailed(str(exc), session.rec) from exc
    rec = session.rec
    rec.wall_latency = clock.now() - t0
    source = rec.conclusion if rec.conclusion.strip() else rec.trace
    rec.answer = extract_answer(source, config.task_kind)
    return rec


def write_records(records: Iterable[RunRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(RunRecord.from_dict(json.loads(line)))
    return out
