"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class MetamerError(Exception):
    exit_code = 1


class ConfigError(MetamerError, ValueError):
    """Bad configuration or violated call contract."""

    exit_code = 2


class DimensionError(ConfigError):
    pass


class FormatError(MetamerError, ValueError):
    """Malformed input file."""

    exit_code = 4


class NumericError(MetamerError, ArithmeticError):
    """Non-finite values or a failed numerical cross-check."""

    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateReferenceError(NumericError):
    pass
