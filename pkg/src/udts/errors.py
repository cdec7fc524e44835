"""Exception hierarchy shared by every module."""


class UdtsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UdtsError, ValueError):
    """Invalid configuration value, degenerate input or unknown key."""


class ShapeError(UdtsError, ValueError):
    """Array dimensions do not agree."""


class NumericError(UdtsError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class DomainError(UdtsError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StateError(UdtsError, RuntimeError):
    """Stale or inconsistent object state (e.g. an outdated forward trace)."""


class CapabilityError(UdtsError, PermissionError):
    """Caller lacks the accessor required for an evaluation-only operation."""


class FormatError(UdtsError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
