"""Gateway configuration: JSON file, then environment, then explicit flags."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import urlsplit

from ..controller import ControllerConfig, ExitPolicy, PolicyError

ENV_CONFIG = "EARLYEXIT_GATEWAY_CONFIG"
ENV_PREFIX = "EARLYEXIT_GATEWAY_"

# controller settings a gateway config may change
CONTROLLER_KEYS = (
    "tau", "k", "max_len", "conclusion_reserve", "check_max_tokens", "temperature", "top_p",
    "system", "task_kind",
)


class GatewayConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    backend: str = ""
    check_backend: str | None = None
    policy: str = "dtsr"
    controller: dict[str, Any] = field(default_factory=dict)
    allow_overrides: bool = False
    log_level: str = "INFO"
    metrics_enabled: bool = True
    model: str = "earlyexit"
    probe_interval: float = 30.0

    def __post_init__(self) -> None:
        host, port = self.listen_address
        if not 0 < port < 65536:
            raise GatewayConfigError(f"bad listen port {port}")
        for url in (self.backend, self.check_backend):
            if url and url.startswith(("http://", "https://")):
                parts = urlsplit(url)
                backend_port = parts.port or (443 if parts.scheme == "https" else 80)
                if _same_host(parts.hostname or "", host) and backend_port == port:
                    raise GatewayConfigError("listen address must differ from the backend address")
        try:
            ExitPolicy.parse(self.policy)
        except PolicyError as exc:
            raise GatewayConfigError(str(exc)) from exc
        unknown = set(self.controller) - set(CONTROLLER_KEYS)
        if unknown:
            raise GatewayConfigError(f"unknown controller settings: {sorted(unknown)}")
        try:
            self.controller_config()
        except (TypeError, ValueError) as exc:
            raise GatewayConfigError(f"invalid controller settings: {exc}") from exc

    @property
    def listen_address(self) -> tuple[str, int]:
        host, sep, port = self.listen.rpartition(":")
        if not sep or not port.isdigit():
            raise GatewayConfigError(f"listen must be host:port, got {self.listen!r}")
        return host or "127.0.0.1", int(port)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(**self.controller)

    def exit_policy(self) -> ExitPolicy:
        return ExitPolicy.parse(self.policy)


def _same_host(a: str, b: str) -> bool:
    local = {"localhost", "127.0.0.1", "::1", "0.0.0.0"}
    return a == b or (a in local and b in local)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise GatewayConfigError(f"not a boolean: {value!r}")


def _from_env(env: Mapping[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    controller: dict[str, Any] = {}
    for f in fields(GatewayConfig):
        if f.name == "controller":
            continue
        raw = env.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        if f.name in ("allow_overrides", "metrics_enabled"):
            out[f.name] = _bool(raw)
        elif f.name == "probe_interval":
            out[f.name] = float(raw)
        else:
            out[f.name] = raw
    for key in CONTROLLER_KEYS:
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        if key in ("k", "max_len", "conclusion_reserve", "check_max_tokens"):
            controller[key] = int(raw)
        elif key in ("tau", "temperature", "top_p"):
            controller[key] = float(raw)
        else:
            controller[key] = raw
    if controller:
        out["controller"] = controller
    return out


def _merge(base: dict[str, Any], layer: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in layer.items():
        if value is None:
            continue
        if key == "controller":
            out["controller"] = {**out.get("controller", {}), **value}
        else:
            out[key] = value
    return out


def load_gateway_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> GatewayConfig:
    """Layer file < environment < flags. ``None`` flag values are ignored."""
    env = os.environ if env is None else env
    path = path or env.get(ENV_CONFIG)
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise GatewayConfigError(f"cannot read gateway config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise GatewayConfigError("gateway config must be a JSON object")
        known = {f.name for f in fields(GatewayConfig)}
        unknown = set(data) - known
        if unknown:
            raise GatewayConfigError(f"unknown gateway config keys: {sorted(unknown)}")
    try:
        merged = _merge(_merge(data, _from_env(env)), flags or {})
    except ValueError as exc:
        raise GatewayConfigError(str(exc)) from exc
    return GatewayConfig(**merged)
