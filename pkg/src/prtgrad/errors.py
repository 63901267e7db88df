"""Error types shared across the package.

The CLI maps these onto exit codes: InvalidInputError -> 2,
NumericalError -> 3.
"""


class PrtgradError(Exception):
    """Base class for package errors."""


class InvalidInputError(PrtgradError, ValueError):
    """Malformed files, bad shapes, violated preconditions."""


class NumericalError(PrtgradError, ArithmeticError):
    """Non-finite values where finite ones are required (diverged training,
    NaN gradients, corrupt HDR data)."""
