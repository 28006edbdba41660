"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see ``cpsc.cli``).
"""


class CpscError(Exception):
    exit_code = 1


class DimensionError(CpscError, ValueError):
    exit_code = 2


class ConfigError(CpscError, ValueError):
    exit_code = 2


class NumericError(CpscError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CalibrationError(CpscError, RuntimeError):
    exit_code = 4


class ConsistencyError(CpscError, RuntimeError):
    """A forward cache no longer matches the parameters it was built from."""

    exit_code = 5


class StatisticsError(CpscError, ValueError):
    exit_code = 3
