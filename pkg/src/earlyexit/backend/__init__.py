from .base import Backend
from .http import HttpBackend, make_backend
from .mock import Match, MockBackend, MockScript, ScriptEntry, ScriptError, load_script, parse_script
from .types import (
    BackendCapabilities,
    BackendConnectionError,
    BackendError,
    BackendStatusError,
    BackendTimeout,
    CapabilityError,
    Clock,
    Completion,
    CompletionRequest,
    CompletionStream,
    MalformedEvent,
    NoScriptMatch,
    StreamInterrupted,
    TokenChunk,
    Usage,
    VirtualClock,
)

__all__ = [
    "Backend",
    "BackendCapabilities",
    "BackendConnectionError",
    "BackendError",
    "BackendStatusError",
    "BackendTimeout",
    "CapabilityError",
    "Clock",
    "Completion",
    "CompletionRequest",
    "CompletionStream",
    "HttpBackend",
    "MalformedEvent",
    "Match",
    "MockBackend",
    "MockScript",
    "NoScriptMatch",
    "ScriptEntry",
    "ScriptError",
    "StreamInterrupted",
    "TokenChunk",
    "Usage",
    "VirtualClock",
    "load_script",
    "make_backend",
    "parse_script",
]
