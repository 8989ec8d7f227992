from .app import ContentAssembler, Gateway, create_app, parse_chat_request, serve
from .config import GatewayConfig, GatewayConfigError, load_gateway_config
from .metrics import SessionMetrics, parse_exposition

__all__ = [
    "ContentAssembler",
    "Gateway",
    "GatewayConfig",
    "GatewayConfigError",
    "SessionMetrics",
    "create_app",
    "load_gateway_config",
    "parse_chat_request",
    "parse_exposition",
    "serve",
]
