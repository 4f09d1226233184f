"""Exception hierarchy shared by every module."""


class BypassFLError(Exception):
    """Base class for all package errors."""


class StructuralError(BypassFLError, ValueError):
    """Shapes, names or architectures that do not fit together."""


class DomainError(BypassFLError, ValueError):
    """A value lies outside the domain an operation accepts."""


class NumericError(BypassFLError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(BypassFLError, ValueError):
    """Invalid experiment or generator configuration."""


class UsageError(BypassFLError, RuntimeError):
    """An API was called out of order."""


class IntegrityError(BypassFLError, IOError):
    """A checkpoint failed its checksum or is truncated."""
