"""Exception types shared across the package."""


class BnsegError(Exception):
    """Base class for all package errors."""


class DimensionError(BnsegError):
    """Tensor shapes do not conform to an operation's contract."""


class ConfigError(BnsegError):
    """A configuration value is invalid or inconsistent."""


class NumericError(BnsegError):
    """A numeric input is degenerate (zero norm, out-of-domain, non-finite)."""


class StateError(BnsegError):
    """An operation was invoked in an invalid runtime state."""
