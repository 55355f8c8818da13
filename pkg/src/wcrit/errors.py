"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value is structurally invalid or out of range."""


class UsageError(ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(ArithmeticError):
    """A numeric computation produced a non-finite intermediate."""
