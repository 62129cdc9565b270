"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (usage errors are handled by
argparse itself): DataError -> 3, DivergenceError -> 4.
"""


class GripforgeError(Exception):
    """Base class for errors raised by this package."""


class DataError(GripforgeError):
    """Malformed, missing, or inconsistent input data."""


class ConstantTargetError(DataError):
    """Target series has zero variance, so R-squared is undefined."""


class DivergenceError(GripforgeError):
    """Training produced a non-finite or runaway loss/gradient."""
