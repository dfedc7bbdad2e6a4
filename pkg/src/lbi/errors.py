"""Exception types shared across the package.

Every error the command-line layer maps to an exit code lives here so the
mapping stays in one place: ConfigError and ParseError mean the caller gave
us something unusable (exit 2), NumericError means the optimization itself
produced non-finite values (exit 3).
"""

from __future__ import annotations


class LbiError(Exception):
    """Base class for package-specific errors."""


class ConfigError(LbiError, ValueError):
    """A configuration value or combination of values is invalid."""


class ParseError(LbiError, ValueError):
    """An input file could not be parsed. Message names the offending line."""


class NumericError(LbiError, RuntimeError):
    """Optimization produced a non-finite quantity.

    ``iteration`` is the zero-based iteration at which the failure surfaced,
    or None when the failure happened outside the main loop.  ``run`` attaches
    the trace rows completed so far as ``partial_trace``.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.partial_trace: list = []
