"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so keep the grouping stable.
"""


class SameStageError(Exception):
    exit_code = 1


class ConfigurationError(SameStageError, ValueError):
    exit_code = 2


class UsageError(SameStageError, RuntimeError):
    """An operation was applied to the wrong kind of input (e.g. the wrong branch)."""

    exit_code = 2


class DimensionError(SameStageError, ValueError):
    exit_code = 2


class ContractViolation(SameStageError, ValueError):
    exit_code = 2


class DataError(SameStageError, OSError):
    exit_code = 3


class NumericalDegeneracyError(SameStageError, ArithmeticError):
    exit_code = 4


class NonFiniteLossError(SameStageError, FloatingPointError):
    """Raised when a training loss becomes NaN/inf. Carries a diagnostic snapshot."""

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
