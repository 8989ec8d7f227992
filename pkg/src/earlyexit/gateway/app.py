"""OpenAI-compatible chat-completions service running the exit controller.

Each request becomes one controller run. Think text is stripped from the
reply unless the request sets ``"include_reasoning": true``. When the
gateway allows it, a request may carry ``"dtsr": {"policy", "tau", "k"}``
to change the exit policy for that request only.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Iterator

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse
from fastapi.concurrency import run_in_threadpool

from ..backend.base import Backend
from ..backend.http import make_backend
from ..backend.types import BackendTimeout, CapabilityError
from ..controller import ControllerConfig, ExitPolicy, PolicyError, RunFailed, RunRecord, run
from .config import GatewayConfig
from .metrics import SessionMetrics

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class RequestError(ValueError):
    pass


class _Cancelled(Exception):
    pass


@dataclass
class ChatJob:
    question: str
    history: list[tuple[str, str]]
    policy: ExitPolicy
    config: ControllerConfig
    stream: bool
    include_reasoning: bool
    seed: int | None


def _number(body: dict, key: str, lo: float, hi: float) -> float | None:
    if key not in body or body[key] is None:
        return None
    v = body[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RequestError(f"{key} must be a number")
    if not lo <= v <= hi:
        raise RequestError(f"{key} must be within [{lo}, {hi}]")
    return float(v)


def _flag(body: dict, key: str) -> bool:
    v = body.get(key, False)
    if not isinstance(v, bool):
        raise RequestError(f"{key} must be a boolean")
    return v


def parse_chat_request(body: Any, gw: GatewayConfig, base: ControllerConfig,
                       policy: ExitPolicy) -> ChatJob:
    if not isinstance(body, dict):
        raise RequestError("request body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise RequestError("messages must be a non-empty list")
    turns = []
    for i, m in enumerate(messages):
        if not isinstance(m, dict) or m.get("role") not in ROLES or not isinstance(m.get("content"), str):
            raise RequestError(f"messages[{i}] needs a role in {ROLES} and string content")
        turns.append((m["role"], m["content"]))
    if turns[-1][0] != "user" or not turns[-1][1]:
        raise RequestError("the last message must be a non-empty user message")
    changes: dict[str, Any] = {}
    if turns[0][0] == "system":
        changes["system"] = turns[0][1]
        turns = turns[1:]
    if any(role == "system" for role, _ in turns):
        raise RequestError("a system message is only allowed first")

    temperature = _number(body, "temperature", 0, 2)
    if temperature is not None:
        changes["temperature"] = temperature
    top_p = _number(body, "top_p", 0, 1)
    if top_p is not None:
        if top_p == 0:
            raise RequestError("top_p must be > 0")
        changes["top_p"] = top_p
    max_tokens = body.get("max_tokens", body.get("max_completion_tokens"))
    if max_tokens is not None:
        if isinstance(max_tokens, bool) or not isinstance(max_tokens, int) or max_tokens < 1:
            raise RequestError("max_tokens must be a positive integer")
        changes["max_len"] = max_tokens
        changes["conclusion_reserve"] = min(base.conclusion_reserve, max_tokens // 4)
    seed = body.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise RequestError("seed must be an integer")

    overrides = body.get("dtsr")
    if overrides is not None:
        if not gw.allow_overrides:
            raise RequestError("per-request dtsr overrides are disabled on this gateway")
        if not isinstance(overrides, dict):
            raise RequestError("dtsr must be an object")
        unknown = set(overrides) - {"policy", "tau", "k"}
        if unknown:
            raise RequestError(f"unknown dtsr fields: {sorted(unknown)}")
        if "policy" in overrides:
            if not isinstance(overrides["policy"], str):
                raise RequestError("dtsr.policy must be a string")
            try:
                policy = ExitPolicy.parse(overrides["policy"])
            except PolicyError as exc:
                raise RequestError(str(exc)) from exc
        tau = _number(overrides, "tau", 0, 100)
        if tau is not None:
            changes["tau"] = tau
        if "k" in overrides:
            k = overrides["k"]
            if isinstance(k, bool) or not isinstance(k, int) or k < 0:
                raise RequestError("dtsr.k must be a non-negative integer")
            changes["k"] = k
    try:
        config = base.with_overrides(**changes)
    except ValueError as exc:
        raise RequestError(str(exc)) from exc
    return ChatJob(
        question=turns[-1][1],
        history=turns[:-1],
        policy=policy,
        config=config,
        stream=_flag(body, "stream"),
        include_reasoning=_flag(body, "include_reasoning"),
        seed=seed,
    )


class ContentAssembler:
    """Turns controller events into client-visible content deltas.

    Streaming and non-streaming replies both go through this class, so the
    non-streamed content is exactly the concatenation of the streamed deltas.
    """

    def __init__(self, include_reasoning: bool) -> None:
        self.include_reasoning = include_reasoning
        self._answer_started = False
        self.parts: list[str] = []

    def push(self, kind: str, text: str) -> str:
        if not self.include_reasoning:
            if kind != "answer":
                return ""
            if not self._answer_started:
                text = text.lstrip("\n")
                if not text:
                    return ""
                self._answer_started = True
        if text:
            self.parts.append(text)
        return text

    @property
    def content(self) -> str:
        return "".join(self.parts)


def usage_block(rec: RunRecord) -> dict[str, Any]:
    return {
        "prompt_tokens": 0,
        "completion_tokens": rec.tokens_main,
        "total_tokens": rec.tokens_main,
        "checks": len(rec.check_events),
        "check_tokens": rec.tokens_check_overhead,
        "exit_kind": rec.exit_kind,
        "trace_tokens": rec.tokens_think,
    }


def _finish_reason(rec: RunRecord) -> str:
    return "length" if rec.truncated else "stop"


def _error_body(message: str, kind: str, partial: dict | None = None) -> dict[str, Any]:
    err: dict[str, Any] = {"message": message, "type": kind}
    if partial is not None:
        err["partial"] = partial
    return {"error": err}


def _partial(rec: RunRecord, content: str) -> dict[str, Any]:
    return {
        "content": content,
        "trace_tokens": rec.tokens_think,
        "completion_tokens": rec.tokens_main,
        "checks": len(rec.check_events),
        "error": rec.error,
    }


def _failure_status(exc: RunFailed) -> int:
    if isinstance(exc.__cause__, BackendTimeout):
        return 504
    if isinstance(exc.__cause__, CapabilityError):
        return 400
    return 502


def _sse(obj: dict[str, Any]) -> str:
    return "data: " + json.dumps(obj, ensure_ascii=False) + "\n\n"


class Gateway:
    def __init__(self, config: GatewayConfig, backend: Backend | None = None,
                 check_backend: Backend | None = None) -> None:
        self.config = config
        self.backend = backend or make_backend(config.backend)
        if check_backend is None and config.check_backend:
            check_backend = make_backend(config.check_backend)
        self.check_backend = check_backend
        self.controller = config.controller_config()
        self.policy = config.exit_policy()
        self.metrics = SessionMetrics()
        self.probe_ok = False
        self.probe_time = 0.0
        self.probe()

    def probe(self) -> bool:
        healthy = getattr(self.backend, "healthy", None)
        try:
            self.probe_ok = bool(healthy()) if healthy is not None else True
        except Exception:  # a probe must never take the service down
            logger.exception("backend probe failed")
            self.probe_ok = False
        self.probe_time = time.monotonic()
        return self.probe_ok

    def health(self) -> dict[str, Any]:
        age = time.monotonic() - self.probe_time
        if age > self.config.probe_interval:
            self.probe()
            age = 0.0
        return {"status": "ok" if self.probe_ok else "degraded", "backend_probe_age_s": round(age, 3)}

    def _run(self, job: ChatJob, on_event) -> RunRecord:
        return run(
            job.question, job.policy, job.config, self.backend, self.check_backend,
            question_id=uuid.uuid4().hex[:12], seed=job.seed, on_event=on_event, history=job.history,
        )

    def _envelope(self, rid: str, created: int, obj: str) -> dict[str, Any]:
        return {"id": rid, "object": obj, "created": created, "model": self.config.model}

    def _record(self, rec: RunRecord, started: float) -> None:
        if self.config.metrics_enabled:
            self.metrics.record_run(rec, time.perf_counter() - started)

    def complete(self, job: ChatJob) -> tuple[int, dict[str, Any]]:
        assembler = ContentAssembler(job.include_reasoning)
        started = time.perf_counter()
        try:
            rec = self._run(job, lambda kind, text: assembler.push(kind, text))
        except RunFailed as exc:
            self.metrics.request_failed()
            self._record(exc.record, started)
            status = _failure_status(exc)
            return status, _error_body(str(exc), "backend_error", _partial(exc.record, assembler.content))
        self._record(rec, started)
        rid, created = "chatcmpl-" + uuid.uuid4().hex, int(time.time())
        body = self._envelope(rid, created, "chat.completion")
        body["choices"] = [{
            "index": 0,
            "message": {"role": "assistant", "content": assembler.content},
            "finish_reason": _finish_reason(rec),
        }]
        body["usage"] = usage_block(rec)
        return 200, body

    def stream(self, job: ChatJob) -> Iterator[str]:
        events: queue.Queue = queue.Queue()
        cancelled = threading.Event()
        assembler = ContentAssembler(job.include_reasoning)
        started = time.perf_counter()

        def on_event(kind: str, text: str) -> None:
            if cancelled.is_set():
                raise _Cancelled()
            delta = assembler.push(kind, text)
            if delta:
                events.put(("delta", delta))

        def worker() -> None:
            try:
                events.put(("done", self._run(job, on_event)))
            except RunFailed as exc:
                events.put(("failed", exc))
            except _Cancelled:
                events.put(("cancelled", None))
            except Exception as exc:  # surfaced to the client as an error event
                logger.exception("controller run crashed")
                events.put(("crashed", exc))

        thread = threading.Thread(target=worker, daemon=True)
        thread.start()
        rid, created = "chatcmpl-" + uuid.uuid4().hex, int(time.time())

        def chunk(delta: dict, finish: str | None = None) -> dict[str, Any]:
            obj = self._envelope(rid, created, "chat.completion.chunk")
            obj["choices"] = [{"index": 0, "delta": delta, "finish_reason": finish}]
            return obj

        try:
            yield _sse(chunk({"role": "assistant", "content": ""}))
            while True:
                kind, payload = events.get()
                if kind == "delta":
                    yield _sse(chunk({"content": payload}))
                    continue
                if kind == "done":
                    self._record(payload, started)
                    final = chunk({}, _finish_reason(payload))
                    final["usage"] = usage_block(payload)
                    yield _sse(final)
                elif kind == "failed":
                    self.metrics.request_failed()
                    self._record(payload.record, started)
                    status = _failure_status(payload)
                    err = _error_body(str(payload), "backend_error",
                                      _partial(payload.record, assembler.content))
                    err["error"]["code"] = status
                    yield _sse(err)
                else:
                    self.metrics.request_failed()
                    yield _sse(_error_body(str(payload), "internal_error"))
                yield "data: [DONE]\n\n"
                return
        finally:
            cancelled.set()


def create_app(config: GatewayConfig, backend: Backend | None = None,
               check_backend: Backend | None = None) -> FastAPI:
    gateway = Gateway(config, backend, check_backend)
    app = FastAPI(title="earlyexit gateway")
    app.state.gateway = gateway

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError):
            return JSONResponse(_error_body("body is not valid JSON", "invalid_request_error"), 400)
        try:
            job = parse_chat_request(body, gateway.config, gateway.controller, gateway.policy)
        except RequestError as exc:
            return JSONResponse(_error_body(str(exc), "invalid_request_error"), 400)
        gateway.metrics.request_started()
        if job.stream:
            return StreamingResponse(gateway.stream(job), media_type="text/event-stream")
        status, payload = await run_in_threadpool(gateway.complete, job)
        return JSONResponse(payload, status)

    @app.get("/healthz")
    def healthz():
        h = gateway.health()
        return JSONResponse(h, 200 if h["status"] == "ok" else 503)

    @app.get("/metrics")
    def metrics():
        if not config.metrics_enabled:
            return PlainTextResponse("metrics disabled\n", 404)
        return PlainTextResponse(gateway.metrics.exposition())

    return app


def serve(config: GatewayConfig, backend: Backend | None = None) -> None:
    import uvicorn

    logging.basicConfig(level=config.log_level.upper())
    app = create_app(config, backend)
    if not app.state.gateway.probe_ok:
        raise ConnectionError(f"backend {config.backend!r} is not reachable")
    host, port = config.listen_address
    uvicorn.run(app, host=host, port=port, log_level=config.log_level.lower())
