"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: usage problems exit 1, bad input data
exits 2, numerical failures exit 3.
"""


class VoxEditError(Exception):
    """Base class for all package errors."""


class UsageError(VoxEditError):
    """Bad configuration or arguments (missing keys, invalid options)."""


class DataError(VoxEditError, ValueError):
    """Malformed or inconsistent input data."""


class ExtractionError(DataError):
    """No voice attribute descriptor could be resolved from a prompt."""


class NumericalError(VoxEditError, ArithmeticError):
    """Non-finite value produced during a computation."""
