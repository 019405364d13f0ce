"""
Exception hierarchy for the kinetics toolkit.
"""
from typing import Any, List, Optional


class KineticsError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(KineticsError, ValueError):
    """Inconsistent inputs: dimension mismatch, missing snapshot, bad config."""


class ArgumentError(KineticsError, ValueError):
    """Invalid distribution or step parameters."""


class ModelParseError(KineticsError, ValueError):
    """A model file could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, field: Optional[str] = None):
        self.path = path
        self.field = field
        context = ", ".join(filter(None, [f"file {path}" if path else None,
                                          f"field '{field}'" if field else None]))
        super().__init__(f"{message} ({context})" if context else message)


class ModelValidationError(KineticsError, ValueError):
    """A reaction network violates the bounded-population assumptions."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid reaction network: " + "; ".join(self.violations))


class BridgeError(KineticsError, RuntimeError):
    """The Poisson-bridge tau-leap could not produce a nonnegative step."""

    def __init__(self, message: str, state: Any = None, step: Optional[int] = None, time: Optional[float] = None):
        self.state = state
        self.step = step
        self.time = time
        super().__init__(f"{message} (state={state}, step={step}, t={time})")


class SolverError(KineticsError, RuntimeError):
    """Backward Kolmogorov integration failed."""
