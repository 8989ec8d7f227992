"""Serve a scripted mock over the OpenAI completions wire protocol.

Useful for exercising :class:`~earlyexit.backend.http.HttpBackend` and the
gateway end to end without a model.
"""

from __future__ import annotations

import json
from typing import Any, Iterator

import httpx

from .mock import MockBackend
from .types import BackendError, CompletionRequest, NoScriptMatch


def body_to_request(body: dict[str, Any]) -> CompletionRequest:
    stop = body.get("stop") or ()
    if isinstance(stop, str):
        stop = (stop,)
    bias = body.get("logit_bias")
    return CompletionRequest(
        prompt=body["prompt"],
        max_tokens=int(body.get("max_tokens", 16)),
        temperature=float(body.get("temperature", 1.0)),
        top_p=float(body.get("top_p", 1.0)),
        stop=tuple(stop),
        want_logprobs=bool(body.get("logprobs")),
        logit_bias={int(k): float(v) for k, v in bias.items()} if bias else None,
        stream=bool(body.get("stream", False)),
        seed=body.get("seed"),
    )


def _choice(chunk, want_logprobs: bool) -> dict[str, Any]:
    choice: dict[str, Any] = {"index": 0, "text": chunk.text, "finish_reason": None}
    if chunk.finish_reason is not None:
        choice["finish_reason"] = "length" if chunk.finish_reason == "length" else "stop"
    if want_logprobs:
        choice["logprobs"] = {"token_logprobs": list(chunk.logprobs or ())}
    return choice


def sse_lines(mock: MockBackend, request: CompletionRequest) -> Iterator[str]:
    """SSE lines for a streamed completion.

    Mock chunks carrying several tokens are sent as one event each, so the
    client counts them from ``token_logprobs`` when logprobs were requested
    and from the trailing usage object otherwise.
    """
    stream = mock.stream_complete(request)
    for chunk in stream:
        event = {"object": "text_completion", "choices": [_choice(chunk, request.want_logprobs)]}
        yield "data: " + json.dumps(event)
    usage = stream.usage
    yield "data: " + json.dumps({
        "choices": [],
        "usage": {
            "prompt_tokens": usage.prompt_tokens,
            "completion_tokens": usage.completion_tokens,
            "total_tokens": usage.prompt_tokens + usage.completion_tokens,
        },
    })
    yield "data: [DONE]"


def completion_json(mock: MockBackend, request: CompletionRequest) -> dict[str, Any]:
    stream = mock.stream_complete(request)
    chunks = list(stream)
    text = "".join(c.text for c in chunks)
    choice: dict[str, Any] = {"index": 0, "text": text, "finish_reason": chunks[-1].finish_reason}
    if request.want_logprobs:
        choice["logprobs"] = {"token_logprobs": [lp for c in chunks for lp in (c.logprobs or ())]}
    usage = stream.usage
    return {
        "object": "text_completion",
        "choices": [choice],
        "usage": {"prompt_tokens": usage.prompt_tokens, "completion_tokens": usage.completion_tokens},
    }


def mock_transport(mock: MockBackend, *, drop_done: bool = False) -> httpx.MockTransport:
    """An httpx transport answering completions requests from ``mock``.

    ``drop_done`` omits the terminating ``[DONE]`` event. An entry with
    ``fail_after`` ends the event stream abruptly after that many chunks.
    """

    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.path.endswith("/models"):
            return httpx.Response(200, json={"data": [{"id": "mock"}]})
        body = json.loads(request.content)
        try:
            req = body_to_request(body)
            if req.stream:
                lines: list[str] = []
                try:
                    for line in sse_lines(mock, req):
                        lines.append(line)
                except BackendError:
                    if not lines:
                        raise
                    drop = False  # scripted failure: the body just stops
                else:
                    drop = drop_done
                if drop:
                    lines = lines[:-1]
                payload = "".join(line + "\n\n" for line in lines)
                return httpx.Response(200, text=payload, headers={"content-type": "text/event-stream"})
            return httpx.Response(200, json=completion_json(mock, req))
        except NoScriptMatch as exc:
            return httpx.Response(404, json={"error": str(exc)})
        except BackendError as exc:
            return httpx.Response(500, json={"error": str(exc)})

    return httpx.MockTransport(handler)


def create_mock_app(mock: MockBackend):
    """FastAPI app exposing ``mock`` at ``/v1/completions``."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, StreamingResponse

    app = FastAPI(title="scripted completions mock")

    @app.get("/v1/models")
    def models() -> dict[str, Any]:
        return {"data": [{"id": "mock"}]}

    @app.post("/v1/completions")
    async def completions(request: Request):
        req = body_to_request(await request.json())
        try:
            if req.stream:
                return StreamingResponse(
                    (line + "\n\n" for line in sse_lines(mock, req)),
                    media_type="text/event-stream",
                )
            return completion_json(mock, req)
        except NoScriptMatch as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)

    return app
