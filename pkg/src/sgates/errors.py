"""Exception types shared across the package.

The CLI maps these onto exit codes: schema, validation and parse problems
are usage errors (exit 2); computation failures are runtime errors (exit 3).
"""


class GatesError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(GatesError):
    """A required column or field is missing or misnamed."""


class ValidationError(GatesError):
    """Input data violates a precondition (divisibility, binary treatment, ...)."""


class ParseError(GatesError):
    """A cell could not be parsed; the message names the offending row."""


class ComputationError(GatesError):
    """A numerical step failed (undersized cell, factorization failure, ...)."""
