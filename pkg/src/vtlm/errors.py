"""Exception taxonomy shared across the package.

CLI exit-code mapping: usage errors -> 1, DataError -> 2, NumericError -> 3.
"""


class VtlmError(Exception):
    """Base class for package errors."""


class ShapeError(VtlmError, ValueError):
    """Operand shapes are incompatible. Messages name both shapes."""


class ContractError(VtlmError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(VtlmError, ValueError):
    """Invalid configuration value (bad stage id, non-positive temperature, ...)."""


class NumericError(VtlmError, ArithmeticError):
    """Numerical failure: non-finite inputs, NaN loss, failed gradient check."""


class DeterminismError(NumericError):
    """Two forward passes of a supposedly deterministic function disagreed."""


class DataError(VtlmError, ValueError):
    """Corpus-level problem: schema violation, missing file, bad split."""


class AvailabilityError(DataError):
    """Not enough rows to satisfy a sampling request; names the category."""


class DependencyError(VtlmError, RuntimeError):
    """A required prior-stage artifact (checkpoint) is missing."""
