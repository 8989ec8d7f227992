from __future__ import annotations

import logging
import threading
from typing import Iterator

from .types import (
    BackendCapabilities,
    BackendError,
    BackendStatusError,
    CapabilityError,
    Clock,
    Completion,
    CompletionRequest,
    CompletionStream,
    NoScriptMatch,
    TokenChunk,
)

logger = logging.getLogger(__name__)


def cut_at_stop(text: str, stop: tuple[str, ...]) -> tuple[str, bool]:
    """Truncate ``text`` before the earliest stop sequence."""
    cut = len(text)
    for s in stop:
        if not s:
            continue
        i = text.find(s)
        if i != -1 and i < cut:
            cut = i
    return text[:cut], cut < len(text)


class Backend:
    """Common surface of completion backends.

    Subclasses implement ``_open_stream`` and ``capabilities``. The base
    class enforces capability checks and the in-flight request limit.
    """

    def __init__(self, max_in_flight: int = 64, clock: Clock | None = None) -> None:
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.clock = clock or Clock()

    def capabilities(self) -> BackendCapabilities:
        raise NotImplementedError

    def _open_stream(self, request: CompletionRequest) -> tuple[Iterator[TokenChunk], int]:
        """Return (chunk iterator, prompt token count)."""
        raise NotImplementedError

    def check_request(self, request: CompletionRequest) -> None:
        caps = self.capabilities()
        if request.want_logprobs and not caps.supports_logprobs:
            raise CapabilityError("backend does not support logprobs")
        if request.logit_bias and not caps.supports_logit_bias:
            raise CapabilityError("backend does not support logit_bias")

    def stream_complete(self, request: CompletionRequest) -> CompletionStream:
        self.check_request(request)
        chunks, prompt_tokens = self._open_stream(request)
        return CompletionStream(self._limited(chunks), prompt_tokens)

    def _limited(self, chunks: Iterator[TokenChunk]) -> Iterator[TokenChunk]:
        with self._slots:
            try:
                yield from chunks
            finally:
                close = getattr(chunks, "close", None)
                if close is not None:
                    close()

    def complete(self, request: CompletionRequest, retries: int = 0) -> Completion:
        """Run a request to completion; ``retries`` re-issues it after transient failures."""
        attempt = 0
        while True:
            try:
                return self._complete_once(request)
            except (CapabilityError, NoScriptMatch):
                raise
            except BackendStatusError as exc:
                if exc.status < 500 or attempt >= retries:
                    raise
            except BackendError:
                if attempt >= retries:
                    raise
            attempt += 1
            logger.warning("retrying completion request (attempt %d)", attempt + 1)

    def _complete_once(self, request: CompletionRequest) -> Completion:
        stream = self.stream_complete(request)
        with stream:
            chunks = list(stream)
        text = "".join(c.text for c in chunks)
        text, stopped = cut_at_stop(text, request.stop)
        logprobs = None
        if request.want_logprobs:
            logprobs = [lp for c in chunks for lp in (c.logprobs or ())]
        finish = stream.finish_reason
        if stopped:
            finish = "stop"
        return Completion(text, stream.usage, logprobs, finish, chunks)
