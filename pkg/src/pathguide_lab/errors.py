"""Exception hierarchy for pathguide-lab.

Every error raised by the library derives from ``LabError`` and carries the
process exit code the CLI maps it to.
"""

from __future__ import annotations

from typing import Any


class LabError(Exception):
    """Base class for all pathguide-lab errors."""

    exit_code: int = 1


class ParameterError(LabError, ValueError):
    """An argument is outside its declared range."""


class UnknownItemError(LabError, KeyError):
    """An item id does not resolve in the catalog."""

    def __init__(self, item_id: int) -> None:
        super().__init__(f"Unknown item id: {item_id}")
        self.item_id = item_id

    def __str__(self) -> str:
        return str(self.args[0])


class DegenerateStatisticsError(LabError):
    """Normalization requested for a component whose standard deviation is zero."""


class StatsFrozenError(LabError):
    """Warm-up statistics were updated after being frozen."""


class IntegrationError(LabError):
    """The gradient-flow integrator produced a non-finite state."""

    exit_code = 3

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class EnumerationBudgetError(LabError):
    """Exact enumeration would exceed the configured path budget."""


class UndefinedPositionError(LabError):
    """No enumerated path reaches the requested position."""


class NumericalAbortError(LabError):
    """Training produced a non-finite gradient or parameter."""

    exit_code = 3

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class ConfigError(LabError):
    """Configuration file or override could not be parsed or validated."""

    exit_code = 2


class CheckpointFormatError(LabError):
    """A serialized artifact has an unknown version or malformed content."""


class AcceptanceCheckError(LabError):
    """A verification command found a violated property."""

    exit_code = 4
