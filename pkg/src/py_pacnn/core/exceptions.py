"""Exception hierarchy for Py PACNN."""

from typing import Any


class PacnnError(Exception):
    """Base class for all structured errors raised by the package."""


class DomainError(PacnnError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(PacnnError, ValueError):
    """A configuration value is missing, inconsistent or out of range."""


class InsufficientDataError(PacnnError, ValueError):
    """Too few samples or annotations to carry out an operation."""


class DegenerateDataError(InsufficientDataError):
    """Samples are present but carry no usable spread (e.g. identical rows)."""


class ShapeError(PacnnError, ValueError):
    """Array or map shapes are incompatible."""


class StateError(PacnnError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class FormatError(PacnnError, ValueError):
    """A file does not follow the documented on-disk format."""


class DivergenceError(PacnnError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, report: dict[str, Any] | None = None):
        super().__init__(message)
        self.report = report or {}
