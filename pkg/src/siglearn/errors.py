"""Exception types shared across the package."""


class SiglearnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SiglearnError, ValueError):
    """Invalid configuration value or missing key."""


class ShapeMismatchError(SiglearnError, ValueError):
    """Operands have incompatible channels, degree, or vector length."""


class DomainError(SiglearnError, ValueError):
    """Input violates a mathematical precondition (e.g. wrong scalar part)."""


class RangeError(SiglearnError, ValueError):
    """Requested time or index lies outside the available span."""


class OrderingError(SiglearnError, ValueError):
    """Timestamps are not monotone."""


class InsufficientDataError(SiglearnError, ValueError):
    """Not enough samples for the requested estimate."""


class DivergenceError(SiglearnError, RuntimeError):
    """A numeric computation left the finite range; carries step context."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})
