"""Exception hierarchy; the CLI maps ``exit_code`` to the process status."""

from typing import Any, Optional


class ScklsError(Exception):
    """Base class for every error the toolkit raises on purpose"""

    exit_code: int = 1


class DomainError(ScklsError, ValueError):
    """Invalid argument value (non-finite input, out-of-range parameter)"""

    exit_code = 2


class MalformedDataError(ScklsError):
    """Input file cannot be parsed into a dataset"""

    exit_code = 2


class ConstantColumnError(DomainError):
    """An input column has zero range"""

    def __init__(self, column: str):
        super().__init__(f"input column '{column}' is constant (zero range)")
        self.column = column


class DegenerateGridError(ScklsError):
    """Every kernel weight vanishes at some evaluation point"""

    exit_code = 2

    def __init__(self, index: int, point: Any):
        super().__init__(
            f"evaluation point {index} at {list(map(float, point))} receives zero total kernel weight"
        )
        self.index = index


class DegenerateHullError(ScklsError):
    """Observations are affinely dependent, so their hull has no interior"""

    exit_code = 2


class UnsupportedStructureError(ScklsError):
    """Operation needs a lattice (or other structure) the grid does not have"""

    exit_code = 2


class SingularLocalDesignError(ScklsError):
    """Local linear normal equations are singular at an evaluation point"""

    exit_code = 3

    def __init__(self, index: int, point: Any):
        super().__init__(
            f"local design is singular at evaluation point {index} {list(map(float, point))}; "
            f"widen the bandwidth or enable ridge regularization"
        )
        self.index = index


class QpSolveError(ScklsError):
    """Solver stopped without an optimal point"""

    exit_code = 3

    def __init__(self, message: str, solution: Optional[Any] = None):
        super().__init__(message)
        self.solution = solution


class InfeasibleProblemError(QpSolveError):
    """Constraint set is empty; ``solution.certificate`` holds the Farkas ray"""


class BootstrapAbortedError(ScklsError):
    """Too many bootstrap replicates failed"""

    exit_code = 3


class ShapeConsistencyError(ScklsError):
    """Constrained objective fell below the unconstrained one"""

    exit_code = 3


class IdentificationError(ScklsError):
    """Contextual coefficients are not identified"""

    exit_code = 4
