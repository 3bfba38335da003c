from __future__ import annotations

from typing import Any, Dict, Optional


class LBSCError(Exception):
    """Base class for every error raised by the lbsc package."""


class DataQualityError(LBSCError, ValueError):
    """Rejected input data: non-finite values or mismatched dimensions."""


class FittingError(LBSCError):
    """Gram matrix could not be factorized even after jitter escalation."""

    def __init__(self, message: str, jitter: float):
        super().__init__(f"{message} (jitter tried up to {jitter:.1e})")
        self.jitter = jitter


class QPInfeasibleError(LBSCError):
    """Hard (slack-free) rows cannot be satisfied inside the input box."""


class SimulationFault(LBSCError):
    """The plant produced a non-finite state."""

    def __init__(self, message: str, state_dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.state_dump = state_dump or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.state_dump:
            return base
        return f"{base} | state={self.state_dump}"


class ScenarioError(LBSCError, ValueError):
    """Scenario file missing, unreadable or invalid."""
