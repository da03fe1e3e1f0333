"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 1)."""


class DataError(ValueError):
    """Missing, malformed or inconsistent dataset content (exit code 2)."""


class NumericalError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required (exit code 3)."""
