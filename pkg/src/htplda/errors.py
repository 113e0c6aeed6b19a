class HtPldaError(Exception):
    """Base class for errors raised by this package."""


class DataError(HtPldaError, ValueError):
    """Malformed input: bad files, mismatched dimensions, unknown ids."""


class NumericalError(HtPldaError, ArithmeticError):
    """A linear-algebra step failed (singular or non-PD matrix, non-finite value)."""
