"""Exception types shared across the package; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 1)."""


class DataError(ValueError):
    """Malformed input data or an unusable dataset (exit code 2)."""


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during training (exit code 3)."""
