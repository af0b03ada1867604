"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/parameter problems -> 1,
malformed input data -> 2, numerical failures -> 3.
"""


class HiermixError(Exception):
    """Base class for all package errors."""


class ParameterError(HiermixError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class DomainError(HiermixError, ValueError):
    """A function argument lies outside the mathematical domain."""


class StateError(HiermixError, RuntimeError):
    """Model state is inconsistent (missing margins, empty path set, ...)."""


class NumericalError(HiermixError, ArithmeticError):
    """A linear-algebra or normalisation step failed (non-SPD matrix, all-zero weights)."""


class DataError(HiermixError, ValueError):
    """Input data files are malformed (ragged CSV rows, non-finite entries, bad indices)."""
