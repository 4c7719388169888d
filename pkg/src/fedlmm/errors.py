"""Exception hierarchy.

Every error raised by the package derives from :class:`FedLmmError`.  The two
intermediate classes map onto the command-line exit codes: data problems exit
with 2, numerical failures with 3.
"""

from __future__ import annotations


class FedLmmError(Exception):
    """Base class for all package errors."""


class DataError(FedLmmError):
    """Invalid, missing or inconsistent input data."""


class NumericalError(FedLmmError):
    """A numerical kernel could not produce a trustworthy result."""


# -- data errors ------------------------------------------------------------

class EmptyTable(DataError):
    pass


class NoRowsRemain(DataError):
    pass


class NonPositiveForLog(DataError):
    pass


class UnknownBaseVariable(DataError):
    pass


class TooFewRows(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class ZeroVariance(DataError):
    pass


class ResponseNotFound(DataError):
    pass


class MissingHigherMoments(DataError):
    pass


class SchemaViolation(DataError):
    """A summary file failed validation; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class VersionMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class UnknownColumn(DataError):
    pass


class MismatchedData(DataError):
    pass


# -- numerical errors -------------------------------------------------------

class NotPositiveDefinite(NumericalError):
    pass


class NotDiagonalizableNumerically(NumericalError):
    pass


class DegenerateSource(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularFixedDesign(SingularDesign):
    pass


class TooFewObservations(NumericalError):
    pass


class NonFiniteLikelihood(NumericalError):
    pass


class NonConvergence(NumericalError):
    """Optimizer gave up; ``best`` carries the best point found, if any."""

    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)


class RankDeficiencyWarning(UserWarning):
    """Pseudo-data cannot reproduce the target covariance exactly (n - 1 < rank)."""
