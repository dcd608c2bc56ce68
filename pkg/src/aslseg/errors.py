"""Exception types shared across the package."""


class ASLSegError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ASLSegError, ValueError):
    """Input data violates a documented contract (shape, range, finiteness)."""


class ConfigError(ASLSegError, ValueError):
    """A configuration value or combination of values cannot be honoured."""


class EmptyMaskError(ASLSegError, ValueError):
    """An operation that needs foreground pixels received an empty mask."""


class ConsistencyError(ASLSegError, RuntimeError):
    """The evolving dataset state would break one of its invariants."""
