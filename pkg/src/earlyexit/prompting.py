"""Prompt construction for reasoning runs and sufficiency checks.

Two check framings are supported:

* third person (default): the partial reasoning is quoted inside a fresh
  user turn and the model grades it as an outside reader;
* first person: the grading instruction is appended to the model's own
  in-progress reasoning turn, so it scores itself mid-stream.

Both prompts end with the ``Confidence:`` primer so the reply is just a
number, which :func:`parse_confidence` turns into a score in [0, 100].
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

DEFAULT_SYSTEM = "Please reason step by step, and put your final answer within \\boxed{}."

SUFFICIENCY_INSTRUCTION = (
    "Assess the confidence that the provided thought is sufficient to solve the question.\n"
    "Output only in the format: Confidence: <number>, where <number> is a real value "
    "between 0 and 100. Here, 100 means the thought is fully sufficient to reach the "
    "final answer directly without additional reasoning, and 0 means the thought is "
    "completely insufficient to do so."
)

DEFAULT_SUFFICIENCY_BODY = (
    SUFFICIENCY_INSTRUCTION + "\n\n### Question\n{question}\n\n### Thought\n{thought}\n"
)


class PromptError(ValueError):
    pass


class UnparseableScore(ValueError):
    """The check reply holds no number."""

    def __init__(self, raw: str) -> None:
        super().__init__(f"no confidence value in reply {raw!r}")
        self.raw = raw


@dataclass(frozen=True)
class ChatFormat:
    """Role-header chat layout. Defaults follow the ChatML style of Qwen models."""

    turn_open: str = "<|im_start|>"
    turn_close: str = "<|im_end|>"
    system_role_name: str = "system"
    user_role_name: str = "user"
    assistant_role_name: str = "assistant"
    think_open: str = "<think>"
    think_close: str = "</think>"

    def __post_init__(self) -> None:
        if not self.think_open or not self.think_close:
            raise PromptError("think markers must be non-empty")
        if self.think_open == self.think_close:
            raise PromptError("think_open and think_close must differ")

    def turn(self, role: str, content: str) -> str:
        return f"{self.turn_open}{role}\n{content}{self.turn_close}\n"

    def assistant_header(self) -> str:
        return f"{self.turn_open}{self.assistant_role_name}\n"

    def split_roles(self, rendered: str) -> list[str]:
        """Roles of the turns in a rendered prompt, in order."""
        roles = []
        for part in rendered.split(self.turn_open)[1:]:
            roles.append(part.split("\n", 1)[0])
        return roles


@dataclass(frozen=True)
class PromptTemplate:
    body: str = DEFAULT_SUFFICIENCY_BODY
    assistant_primer: str | None = None  # None: empty think block + "Confidence:"

    def __post_init__(self) -> None:
        for ph in ("{question}", "{thought}"):
            n = self.body.count(ph)
            if n != 1:
                raise PromptError(f"template body must contain {ph} exactly once (found {n})")

    def primer(self, fmt: ChatFormat) -> str:
        if self.assistant_primer is not None:
            return self.assistant_primer
        return f"{fmt.think_open}\n\n{fmt.think_close}\n\nConfidence:"


def load_prompt_config(path: str | Path) -> tuple[ChatFormat, PromptTemplate]:
    """Read ``{"chat_format": {...}, "template": {...}}``; missing parts use defaults."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    fmt = ChatFormat(**data.get("chat_format", {}))
    tmpl = PromptTemplate(**data.get("template", {}))
    return fmt, tmpl


def dump_prompt_config(fmt: ChatFormat, tmpl: PromptTemplate) -> str:
    return json.dumps({"chat_format": asdict(fmt), "template": asdict(tmpl)}, indent=2)


def _fill(body: str, question: str, thought: str) -> str:
    # str.format would choke on braces in LaTeX-heavy thoughts
    i = body.index("{question}")
    j = body.index("{thought}")
    if i < j:
        return body[:i] + question + body[i + 10:j] + thought + body[j + 9:]
    return body[:j] + thought + body[j + 9:i] + question + body[i + 10:]


def render_sufficiency_prompt(
    question: str,
    thought: str,
    fmt: ChatFormat | None = None,
    template: PromptTemplate | None = None,
) -> str:
    if not question:
        raise PromptError("question must be non-empty")
    if not thought:
        raise PromptError("thought must be non-empty")
    fmt = fmt or ChatFormat()
    template = template or PromptTemplate()
    user = _fill(template.body, question, thought)
    return fmt.turn(fmt.user_role_name, user) + fmt.assistant_header() + template.primer(fmt)


def render_reasoning_prompt(
    question: str,
    system: str | None = DEFAULT_SYSTEM,
    fmt: ChatFormat | None = None,
    nothinking: bool = False,
    history: Sequence[tuple[str, str]] = (),
) -> str:
    """Prompt that opens the assistant's think phase.

    ``history`` holds earlier ``(role, content)`` turns, role being one of
    system/user/assistant, rendered between the system turn and the question.
    """
    if not question:
        raise PromptError("question must be non-empty")
    fmt = fmt or ChatFormat()
    roles = {"system": fmt.system_role_name, "user": fmt.user_role_name,
             "assistant": fmt.assistant_role_name}
    parts = []
    if system:
        parts.append(fmt.turn(fmt.system_role_name, system))
    for role, content in history:
        if role not in roles:
            raise PromptError(f"unknown chat role {role!r}")
        parts.append(fmt.turn(roles[role], content))
    parts.append(fmt.turn(fmt.user_role_name, question))
    parts.append(fmt.assistant_header())
    parts.append(fmt.think_open)
    if nothinking:
        parts.append("\n" + fmt.think_close)
    return "".join(parts)


def render_first_person_prompt(
    question: str,
    thought: str,
    fmt: ChatFormat | None = None,
    system: str | None = DEFAULT_SYSTEM,
    instruction: str = SUFFICIENCY_INSTRUCTION,
) -> str:
    """Self-scoring prompt: the instruction follows the model's own partial reasoning.

    ``thought`` is the assistant's think-phase text starting with the
    think-open marker, as in the third-person template.
    """
    if not question:
        raise PromptError("question must be non-empty")
    if not thought:
        raise PromptError("thought must be non-empty")
    fmt = fmt or ChatFormat()
    head = render_reasoning_prompt(question, system, fmt)[: -len(fmt.think_open)]
    return f"{head}{thought}\n\n{instruction}\n\nConfidence:"


_LABEL = re.compile(r"confidence\s*:", re.IGNORECASE)
_NUMBER = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)")


@dataclass(frozen=True)
class ConfidenceScore:
    value: float
    raw: str


def parse_confidence(reply: str) -> ConfidenceScore:
    """First number after an optional ``Confidence:`` label, clamped to [0, 100]."""
    label = _LABEL.search(reply)
    m = _NUMBER.search(reply, label.end() if label else 0)
    if m is None and label is not None:
        m = _NUMBER.search(reply)
    if m is None:
        raise UnparseableScore(reply)
    value = min(max(float(m.group(0)), 0.0), 100.0)
    return ConfidenceScore(value, reply)
