"""Early-exit control for reasoning models."""

from .controller import ControllerConfig, ExitPolicy, RunFailed, RunRecord, run
from .signals import SignalMatcher

__all__ = ["ControllerConfig", "ExitPolicy", "RunFailed", "RunRecord", "SignalMatcher", "run"]
__version__ = "0.1.0"
