"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """Raised when an argument or configuration value violates its contract."""


class BudgetExceededError(RuntimeError):
    """Raised when an exhaustive enumeration would exceed its configured budget."""


class ConfigError(ValueError):
    """Raised by the config parser; carries the offending line or key."""

    def __init__(self, message, line=None, key=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key


class NumericalError(FloatingPointError):
    """Raised when a training update produces non-finite parameters."""
