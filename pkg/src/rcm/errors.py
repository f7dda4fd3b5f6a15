"""Exception and warning types shared across the package."""

from __future__ import annotations


class RcmError(Exception):
    """Base class for all package errors.

    ``category`` is the name printed by the CLI; ``exit_code`` is the process
    status it maps to.
    """

    category = "RcmError"
    exit_code = 1


class NotPositiveDefinite(RcmError, ValueError):
    category = "NotPositiveDefinite"
    exit_code = 4


class DomainError(RcmError, ValueError):
    category = "DomainError"
    exit_code = 3


class DimensionMismatch(DomainError):
    category = "DimensionMismatch"


class BracketError(DomainError):
    """Raised by a strict ν search when the profile is still rising at the cap."""

    category = "BracketError"


class ParseError(RcmError, ValueError):
    category = "ParseError"
    exit_code = 5


class SchemaError(RcmError, ValueError):
    category = "SchemaError"
    exit_code = 5


class MissingValueError(RcmError, ValueError):
    category = "MissingValueError"
    exit_code = 5


class MaxIterationsExceeded(RuntimeWarning):
    """Iteration cap reached before convergence; the best-so-far estimate is returned."""


class NuSaturationWarning(RuntimeWarning):
    """The ν profile was still increasing at the search cap."""


class SampleSizeWarning(UserWarning):
    """Total sample size below the dimension; the Ψ maximum may not be unique."""
