"""Exception hierarchy shared by the assessment pipeline.

``DataError`` covers malformed or inconsistent inputs, ``NumericalError`` covers
solver failures. The CLI maps them to exit codes 2 and 3.
"""

from typing import List, Optional


class SSAError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class UsageError(SSAError):
    exit_code = 1


class DataError(SSAError, ValueError):
    exit_code = 2


class NumericalError(SSAError, ArithmeticError):
    exit_code = 3


class CaseFormatError(DataError):
    """Syntax error in a case file, with a 1-based position."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseValidationError(DataError):
    def __init__(self, violations: List):
        self.violations = list(violations)
        details = "; ".join(v.message for v in self.violations)
        super().__init__(f"invalid case: {details}")


class DatasetFormatError(DataError):
    pass


class ModelFormatError(DataError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


class ModelShapeError(ModelFormatError):
    pass


class SpecMismatchError(DataError):
    pass


class DegenerateDatasetError(DataError):
    pass


class DrawCapExceededError(DataError):
    def __init__(self, kept: int, requested: int, discarded: dict):
        self.kept = kept
        self.requested = requested
        self.discarded = dict(discarded)
        super().__init__(
            f"draw cap exhausted: kept {kept} of {requested} points, discarded {self.discarded}"
        )


class DisconnectedNetworkError(NumericalError):
    pass


class SingularJacobianError(NumericalError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"singular Jacobian at iteration {iteration}")


class IslandingError(NumericalError):
    def __init__(self, branch_id: int, message: Optional[str] = None):
        self.branch_id = branch_id
        super().__init__(message or f"outage of branch {branch_id} islands the network")


class SingularNetworkError(NumericalError):
    pass


class EigenSolverError(NumericalError):
    pass


class CentralityConvergenceError(NumericalError):
    pass


class ContingencyError(NumericalError):
    """A numerical failure while analysing one contingency."""

    def __init__(self, branch_id: int, cause: Exception):
        self.branch_id = branch_id
        self.cause = cause
        super().__init__(f"contingency on branch {branch_id} failed: {cause}")
