"""Streaming client for OpenAI-compatible ``/v1/completions`` servers."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Iterator

import httpx

from .base import Backend, cut_at_stop
from .types import (
    BackendCapabilities,
    BackendConnectionError,
    BackendError,
    BackendStatusError,
    BackendTimeout,
    Completion,
    CompletionRequest,
    MalformedEvent,
    StreamInterrupted,
    TokenChunk,
    Usage,
)

logger = logging.getLogger(__name__)

ENV_BASE_URL = "EARLYEXIT_BASE_URL"
ENV_API_KEY = "EARLYEXIT_API_KEY"
ENV_MODEL = "EARLYEXIT_MODEL"
ENV_DEBUG_LOG = "EARLYEXIT_DEBUG_LOG"

_FINISH_MAP = {"length": "length", "stop": "stop", "eos": "eos", "eos_token": "eos"}


def request_body(request: CompletionRequest, model: str | None) -> dict[str, Any]:
    body: dict[str, Any] = {
        "prompt": request.prompt,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "stream": request.stream,
    }
    if model:
        body["model"] = model
    if request.stop:
        body["stop"] = list(request.stop)
    if request.want_logprobs:
        body["logprobs"] = 1
    if request.logit_bias:
        body["logit_bias"] = {str(k): v for k, v in request.logit_bias.items()}
    if request.seed is not None:
        body["seed"] = request.seed
    if request.stream:
        body["stream_options"] = {"include_usage": True}
    return body


def parse_choice(choice: dict[str, Any]) -> TokenChunk:
    """Convert one ``choices[0]`` object into a chunk."""
    text = choice.get("text") or ""
    if not isinstance(text, str):
        raise MalformedEvent(f"choice text is not a string: {text!r}")
    logprobs = None
    lp = choice.get("logprobs")
    if isinstance(lp, dict) and lp.get("token_logprobs") is not None:
        logprobs = tuple(float(x) if x is not None else 0.0 for x in lp["token_logprobs"])
    if logprobs is not None:
        count = len(logprobs)
    else:
        count = 1 if text else 0
    finish = choice.get("finish_reason")
    return TokenChunk(text, count, logprobs, _FINISH_MAP.get(finish, "stop") if finish else None)


class HttpBackend(Backend):
    """Client for a remote completions server.

    ``supports_logprobs`` left as ``None`` is probed with a one-token
    request the first time capabilities are needed; the answer is cached.
    """

    def __init__(
        self,
        base_url: str | None = None,
        *,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 600.0,
        supports_logprobs: bool | None = None,
        supports_logit_bias: bool = False,
        max_in_flight: int = 64,
        debug_log: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        super().__init__(max_in_flight=max_in_flight)
        base_url = base_url or os.environ.get(ENV_BASE_URL)
        if not base_url:
            raise ValueError(f"no backend URL given and ${ENV_BASE_URL} is unset")
        self.base_url = base_url.rstrip("/")
        if not self.base_url.endswith("/v1"):
            self.base_url += "/v1"
        api_key = api_key or os.environ.get(ENV_API_KEY)
        self.model = model or os.environ.get(ENV_MODEL)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._supports_logprobs = supports_logprobs
        self._supports_logit_bias = supports_logit_bias
        self._caps: BackendCapabilities | None = None
        self._caps_lock = threading.Lock()
        debug_log = debug_log or os.environ.get(ENV_DEBUG_LOG)
        self._debug_path = Path(debug_log) if debug_log else None
        self._debug_lock = threading.Lock()
        self.last_probe: float | None = None

    def close(self) -> None:
        self._client.close()

    def _debug(self, record: dict[str, Any]) -> None:
        if self._debug_path is None:
            return
        with self._debug_lock, self._debug_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def capabilities(self) -> BackendCapabilities:
        with self._caps_lock:
            if self._caps is None:
                logprobs = self._supports_logprobs
                if logprobs is None:
                    logprobs = self._probe_logprobs()
                self._caps = BackendCapabilities(logprobs, self._supports_logit_bias, True)
            return self._caps

    def _probe_logprobs(self) -> bool:
        body = {"prompt": "Hi", "max_tokens": 1, "logprobs": 1, "temperature": 0}
        if self.model:
            body["model"] = self.model
        try:
            r = self._client.post(f"{self.base_url}/completions", json=body)
            r.raise_for_status()
            choice = r.json()["choices"][0]
        except (httpx.HTTPError, KeyError, IndexError, ValueError):
            logger.info("logprobs probe failed; assuming unsupported")
            return False
        lp = choice.get("logprobs")
        return isinstance(lp, dict) and lp.get("token_logprobs") is not None

    def healthy(self) -> bool:
        try:
            r = self._client.get(f"{self.base_url}/models", timeout=10.0)
            ok = r.status_code < 500
        except httpx.HTTPError:
            ok = False
        if ok:
            self.last_probe = time.time()
        return ok

    def _open_stream(self, request: CompletionRequest) -> tuple[Iterator[TokenChunk], int]:
        body = request_body(request, self.model)
        body["stream"] = True
        body.setdefault("stream_options", {"include_usage": True})
        return self._events(body), 0

    def _events(self, body: dict[str, Any]) -> Iterator[TokenChunk]:
        self._debug({"request": body})
        try:
            with self._client.stream("POST", f"{self.base_url}/completions", json=body) as resp:
                if resp.status_code >= 400:
                    resp.read()
                    raise BackendStatusError(resp.status_code, resp.text[:500])
                yield from self._parse_sse(resp.iter_lines())
        except httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        except httpx.ConnectError as exc:
            raise BackendConnectionError(str(exc)) from exc
        except (httpx.RemoteProtocolError, httpx.ReadError) as exc:
            raise StreamInterrupted(str(exc)) from exc

    def _parse_sse(self, lines: Iterator[str]) -> Iterator[TokenChunk]:
        counted = 0
        pending: TokenChunk | None = None  # chunk with finish_reason, held for usage correction
        reported: int | None = None
        done = False
        for line in lines:
            if not line or line.startswith(":"):
                continue
            if not line.startswith("data:"):
                continue
            data = line[5:].strip()
            self._debug({"event": data})
            if data == "[DONE]":
                done = True
                break
            try:
                event = json.loads(data)
            except json.JSONDecodeError as exc:
                raise MalformedEvent(f"undecodable event: {data[:200]!r}") from exc
            if not isinstance(event, dict):
                raise MalformedEvent(f"event is not an object: {data[:200]!r}")
            if "error" in event:
                raise BackendStatusError(500, str(event["error"])[:500])
            usage = event.get("usage")
            if isinstance(usage, dict) and usage.get("completion_tokens") is not None:
                reported = int(usage["completion_tokens"])
            for choice in event.get("choices") or []:
                chunk = parse_choice(choice)
                if pending is not None:
                    # finish_reason only belongs on the last chunk
                    yield TokenChunk(pending.text, pending.token_count, pending.logprobs)
                    pending = None
                counted += chunk.token_count
                if chunk.finish_reason is not None:
                    pending = chunk
                else:
                    yield chunk
        if not done and pending is None:
            raise StreamInterrupted("stream ended without [DONE]")
        if pending is None:
            pending = TokenChunk("", 0, None, "eos")
        extra = (reported - counted) if reported is not None else 0
        if extra > 0 and pending.logprobs is None:
            pending = TokenChunk(pending.text, pending.token_count + extra, None, pending.finish_reason)
        yield pending

    def _complete_once(self, request: CompletionRequest) -> Completion:
        if request.stream:
            return super()._complete_once(request)
        self.check_request(request)
        body = request_body(request, self.model)
        self._debug({"request": body})
        with self._slots:
            try:
                r = self._client.post(f"{self.base_url}/completions", json=body)
            except httpx.TimeoutException as exc:
                raise BackendTimeout(str(exc)) from exc
            except httpx.ConnectError as exc:
                raise BackendConnectionError(str(exc)) from exc
        if r.status_code >= 400:
            raise BackendStatusError(r.status_code, r.text[:500])
        try:
            payload = r.json()
            choice = payload["choices"][0]
        except (ValueError, KeyError, IndexError) as exc:
            raise MalformedEvent("malformed completion response") from exc
        self._debug({"response": payload})
        chunk = parse_choice(choice)
        usage_raw = payload.get("usage") or {}
        usage = Usage(
            int(usage_raw.get("prompt_tokens", 0)),
            int(usage_raw.get("completion_tokens", chunk.token_count)),
        )
        if chunk.logprobs is None and usage.completion_tokens != chunk.token_count:
            chunk = TokenChunk(chunk.text, usage.completion_tokens, None, chunk.finish_reason)
        text, stopped = cut_at_stop(chunk.text, request.stop)
        return Completion(
            text,
            usage,
            list(chunk.logprobs) if chunk.logprobs is not None else None,
            "stop" if stopped else chunk.finish_reason,
            [chunk],
        )


def make_backend(target: str, **kwargs) -> Backend:
    """Build a backend from ``mock:<script.json>`` or an ``http(s)://`` URL."""
    from .mock import MockBackend

    if target.startswith("mock:"):
        return MockBackend.from_file(target[len("mock:"):])
    if target.startswith(("http://", "https://")):
        return HttpBackend(target, **kwargs)
    raise ValueError(f"unrecognised backend {target!r}; use mock:<path> or an http(s) URL")


__all__ = ["HttpBackend", "make_backend", "request_body", "parse_choice", "BackendError"]
