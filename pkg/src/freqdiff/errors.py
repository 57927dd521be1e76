"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class FreqDiffError(Exception):
    exit_code = 1


class ConfigurationError(FreqDiffError, ValueError):
    exit_code = 2


class ContractError(FreqDiffError, ValueError):
    exit_code = 2


class DimensionError(ContractError):
    pass


class InputError(FreqDiffError, ValueError):
    exit_code = 2


class TaskError(FreqDiffError, ValueError):
    """Raised for availability masks that leave nothing to do (or nothing to use)."""

    exit_code = 2


class DataIOError(FreqDiffError, OSError):
    exit_code = 3


class NumericError(FreqDiffError, ArithmeticError):
    exit_code = 4
