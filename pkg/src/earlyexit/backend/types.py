"""Request/response types shared by all completion backends."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Literal

FinishReason = Literal["length", "stop", "eos"]


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int
    temperature: float = 0.6
    top_p: float = 0.95
    stop: tuple[str, ...] = ()
    want_logprobs: bool = False
    logit_bias: dict[int, float] | None = None
    stream: bool = True
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if isinstance(self.stop, list):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class TokenChunk:
    text: str
    token_count: int = 1
    logprobs: tuple[float, ...] | None = None
    finish_reason: FinishReason | None = None

    def __post_init__(self) -> None:
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")
        if self.logprobs is not None:
            if not isinstance(self.logprobs, tuple):
                object.__setattr__(self, "logprobs", tuple(self.logprobs))
            if len(self.logprobs) != self.token_count:
                raise ValueError(
                    f"logprobs length {len(self.logprobs)} != token_count {self.token_count}"
                )


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class BackendCapabilities:
    supports_logprobs: bool = False
    supports_logit_bias: bool = False
    supports_echoless_continuation: bool = True


@dataclass
class Completion:
    text: str
    usage: Usage
    logprobs: list[float] | None = None
    finish_reason: FinishReason | None = None
    chunks: list[TokenChunk] = field(default_factory=list)


class BackendError(RuntimeError):
    """Base class for backend failures; ``partial`` holds chunks received before the failure."""

    def __init__(self, message: str, partial: list[TokenChunk] | None = None) -> None:
        super().__init__(message)
        self.partial: list[TokenChunk] = list(partial or [])


class BackendConnectionError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class MalformedEvent(BackendError):
    pass


class BackendStatusError(BackendError):
    def __init__(self, status: int, message: str, partial: list[TokenChunk] | None = None) -> None:
        super().__init__(f"HTTP {status}: {message}", partial)
        self.status = status


class StreamInterrupted(BackendError):
    """The server closed the stream before signalling completion."""


class CapabilityError(BackendError):
    """The request needs a feature the backend does not offer."""


class NoScriptMatch(BackendError):
    """The mock has no entry for a prompt."""


class CompletionStream:
    """Iterator over the chunks of one streamed completion.

    ``usage`` is final once the iterator is exhausted or closed; for a stream
    closed early it counts only the chunks that were consumed.
    """

    def __init__(self, chunks: Iterator[TokenChunk], prompt_tokens: int = 0) -> None:
        self._it = chunks
        self._prompt_tokens = prompt_tokens
        self._completion_tokens = 0
        self._closed = False
        self.received: list[TokenChunk] = []
        self.finish_reason: FinishReason | None = None

    def __iter__(self) -> CompletionStream:
        return self

    def __next__(self) -> TokenChunk:
        if self._closed:
            raise StopIteration
        try:
            chunk = next(self._it)
        except StopIteration:
            self._closed = True
            raise
        except BackendError as exc:
            self._closed = True
            exc.partial = list(self.received)
            raise
        self.received.append(chunk)
        self._completion_tokens += chunk.token_count
        if chunk.finish_reason is not None:
            self.finish_reason = chunk.finish_reason
        return chunk

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            close = getattr(self._it, "close", None)
            if close is not None:
                close()

    def __enter__(self) -> CompletionStream:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def usage(self) -> Usage:
        return Usage(self._prompt_tokens, self._completion_tokens)

    @property
    def text(self) -> str:
        return "".join(c.text for c in self.received)


class Clock:
    """Wall clock."""

    def now(self) -> float:
        return time.perf_counter()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock(Clock):
    """Logical clock: ``sleep`` advances time instantly, separately per thread."""

    def __init__(self) -> None:
        self._local = threading.local()

    def now(self) -> float:
        return getattr(self._local, "t", 0.0)

    def sleep(self, seconds: float) -> None:
        self._local.t = self.now() + max(seconds, 0.0)
