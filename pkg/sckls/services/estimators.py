"""Regression estimators: local linear, SCKLS, CNLS and monotone linear fits.

SCKLS decision variables are stacked per evaluation point as
``theta_i = (a_i, b_i1, ..., b_id)``; variable ``a_i`` sits at index
``i * (d + 1)`` and ``b_ik`` at ``i * (d + 1) + 1 + k``.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple, Union
import logging

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear
from scipy.spatial import cKDTree

from sckls.config import get_settings
from sckls.errors import (
    DomainError,
    InfeasibleProblemError,
    QpSolveError,
    SingularLocalDesignError,
)
from sckls.services.evaluation_grid import EvalGrid, adjacency_pairs, neighbor_pairs
from sckls.services.kernel_weights import BandwidthSpec, Kernel, as_kernel, weight_matrix
from sckls.services.local_linear import (
    as_inputs,
    normal_equations,
    solve_normal_equations,
    weighted_objective,
)
from sckls.services.qp_solver import (
    QpProblem,
    QpSolution,
    QpStatus,
    dump_problem,
    lazy_constraint_solve,
    solve_qp,
)

logger = logging.getLogger(__name__)


class Curvature(str, Enum):
    CONCAVE = "concave"
    CONVEX = "convex"
    NONE = "none"


class Monotonicity(str, Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    FREE = "free"


@dataclass(frozen=True)
class DerivativeBound:
    """lower <= g^(s)(x_i) <= upper at every evaluation point.

    ``derivative=None`` bounds the function value a_i; ``derivative=k``
    bounds the k-th partial b_ik. Bounds are scalars or per-point arrays.
    """

    derivative: Optional[int]
    lower: Union[float, Sequence[float], None] = None
    upper: Union[float, Sequence[float], None] = None


@dataclass(frozen=True)
class ShapeSpec:
    curvature: Curvature = Curvature.CONCAVE
    monotonicity: Tuple[Monotonicity, ...] = ()
    bounds: Tuple[DerivativeBound, ...] = ()

    @classmethod
    def parse(cls, text: str, d: int) -> "ShapeSpec":
        """'concave-increasing', 'convex', 'increasing', 'concave-decreasing', 'none', ..."""
        curvature, mono = Curvature.NONE, Monotonicity.FREE
        for part in filter(None, text.strip().lower().split("-")):
            if part in ("concave", "convex"):
                curvature = Curvature(part)
            elif part in ("increasing", "decreasing"):
                mono = Monotonicity(part)
            elif part != "none":
                raise DomainError(f"unknown shape component '{part}' in '{text}'")
        return cls(curvature=curvature, monotonicity=(mono,) * d)

    def monotone(self, d: int) -> Tuple[Monotonicity, ...]:
        if not self.monotonicity:
            return (Monotonicity.FREE,) * d
        if len(self.monotonicity) == 1:
            return self.monotonicity * d
        if len(self.monotonicity) != d:
            raise DomainError(f"monotonicity has {len(self.monotonicity)} entries for {d} inputs")
        return self.monotonicity

    @property
    def is_trivial(self) -> bool:
        return (
            self.curvature is Curvature.NONE
            and all(m is Monotonicity.FREE for m in self.monotonicity)
            and not self.bounds
        )

    def label(self) -> str:
        parts = [] if self.curvature is Curvature.NONE else [self.curvature.value]
        monos = {m for m in self.monotonicity if m is not Monotonicity.FREE}
        if len(monos) == 1 and len(set(self.monotonicity)) == 1:
            parts.append(monos.pop().value)
        elif monos:
            parts.append("/".join(m.value for m in self.monotonicity))
        return "-".join(parts) or "none"

    def describe(self) -> dict:
        return {
            "curvature": self.curvature.value,
            "monotonicity": [m.value for m in self.monotonicity],
            "bounds": [
                {
                    "derivative": b.derivative,
                    "lower": None if b.lower is None else np.atleast_1d(b.lower).astype(float).tolist(),
                    "upper": None if b.upper is None else np.atleast_1d(b.upper).astype(float).tolist(),
                }
                for b in self.bounds
            ],
        }


CONCAVE_INCREASING = ShapeSpec(Curvature.CONCAVE, (Monotonicity.INCREASING,))


@dataclass(frozen=True)
class LocalLinearFit:
    grid: EvalGrid
    a: np.ndarray
    b: np.ndarray
    contributions: np.ndarray

    @property
    def objective(self) -> float:
        return float(self.contributions.sum())


@dataclass
class HyperplaneModel:
    """Fitted planes a_i + (x - x_i)'b_i anchored at the grid points"""

    grid: EvalGrid
    a: np.ndarray
    b: np.ndarray
    shape: ShapeSpec
    bandwidth: Optional[BandwidthSpec] = None
    kernel: Optional[Kernel] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grid.d

    def queries(self, x) -> np.ndarray:
        """Query points as a (q, d) array; a single point may be given as a 1-D vector"""
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            return x.reshape(1, 1)
        if x.ndim == 1:
            return x.reshape(-1, 1) if self.d == 1 else x.reshape(1, -1)
        return x

    def plane_values(self, x) -> np.ndarray:
        """(q, m) matrix of every plane evaluated at every query point"""
        Q = self.queries(x)
        if Q.shape[1] != self.d:
            raise DomainError(f"query has dimension {Q.shape[1]} but the model has {self.d}")
        offset = self.a - np.einsum('ik,ik->i', self.grid.points, self.b)
        return offset[None, :] + Q @ self.b.T

    def active_planes(self, x) -> np.ndarray:
        """Index of the supporting plane at each query point; ties go to the lowest index"""
        if self.shape.curvature is Curvature.CONVEX:
            return np.argmax(self.plane_values(x), axis=1)
        if self.shape.curvature is Curvature.CONCAVE:
            return np.argmin(self.plane_values(x), axis=1)
        return cKDTree(self.grid.points).query(self.queries(x))[1]

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 0 or (x.ndim == 1 and self.d > 1)
        values = self.plane_values(x)
        out = values[np.arange(values.shape[0]), self.active_planes(x)]
        return out[0] if single else out


def predict(model: HyperplaneModel, x) -> Union[float, np.ndarray]:
    """min of planes (concave), max of planes (convex), nearest plane otherwise"""
    out = model.predict(x)
    return float(out) if np.ndim(out) == 0 else out


class ShapeConstraints:
    """Linear rows G theta <= c implied by a ShapeSpec on a set of evaluation points.

    Sign and bound rows are always present. Curvature (Afriat) rows form a
    lazy family keyed by ``i * m + l`` for the ordered pair (i, l), i != l.
    """

    def __init__(self, points: np.ndarray, shape: ShapeSpec):
        self.points = np.asarray(points, dtype=float)
        self.m, self.d = self.points.shape
        self.p = self.d + 1
        self.shape = shape
        self.sign = 0.0
        if shape.curvature is Curvature.CONCAVE:
            self.sign = 1.0
        elif shape.curvature is Curvature.CONVEX:
            self.sign = -1.0

    @property
    def n_vars(self) -> int:
        return self.m * self.p

    @property
    def has_curvature(self) -> bool:
        return self.sign != 0.0

    def base_rows(self) -> Tuple[sp.csr_matrix, np.ndarray]:
        rows, cols, vals, rhs = [], [], [], []
        r = 0
        for k, mono in enumerate(self.shape.monotone(self.d)):
            if mono is Monotonicity.FREE:
                continue
            s = -1.0 if mono is Monotonicity.INCREASING else 1.0
            for i in range(self.m):
                rows.append(r)
                cols.append(i * self.p + 1 + k)
                vals.append(s)
                rhs.append(0.0)
                r += 1
        for bound in self.shape.bounds:
            offset = 0 if bound.derivative is None else 1 + int(bound.derivative)
            if bound.derivative is not None and not 0 <= bound.derivative < self.d:
                raise DomainError(f"derivative bound index {bound.derivative} out of range for d={self.d}")
            for limit, s in ((bound.lower, -1.0), (bound.upper, 1.0)):
                if limit is None:
                    continue
                values = np.broadcast_to(np.asarray(limit, dtype=float), (self.m,))
                for i in range(self.m):
                    rows.append(r)
                    cols.append(i * self.p + offset)
                    vals.append(s)
                    rhs.append(s * values[i])
                    r += 1
        G = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.n_vars))
        return G, np.asarray(rhs, dtype=float)

    def rows(self, keys: np.ndarray) -> Tuple[sp.csr_matrix, np.ndarray]:
        keys = np.asarray(keys, dtype=np.int64)
        K = keys.size
        i, l = keys // self.m, keys % self.m
        dx = self.points[i] - self.points[l]
        # concave: -a_i + a_l + b_i'(x_i - x_l) <= 0 ; convex flips every sign
        r = np.repeat(np.arange(K), 2 + self.d)
        c = np.column_stack([i * self.p, l * self.p] + [i * self.p + 1 + k for k in range(self.d)])
        v = self.sign * np.column_stack([-np.ones(K), np.ones(K), dx])
        G = sp.csr_matrix((v.ravel(), (r, c.ravel())), shape=(K, self.n_vars))
        return G, np.zeros(K)

    def violations(self, theta: np.ndarray) -> np.ndarray:
        """(m, m) matrix of Afriat row values; positive entries are violated"""
        T = theta.reshape(self.m, self.p)
        a, b = T[:, 0], T[:, 1:]
        s = np.einsum('ik,ik->i', b, self.points)
        V = self.sign * (a[None, :] - a[:, None] + s[:, None] - b @ self.points.T)
        np.fill_diagonal(V, -np.inf)
        return V

    def violated(self, theta: np.ndarray, tol: float) -> np.ndarray:
        if not self.has_curvature:
            return np.zeros(0, dtype=np.int64)
        i, l = np.nonzero(self.violations(theta) > tol)
        return (i * self.m + l).astype(np.int64)

    def all_keys(self) -> np.ndarray:
        if not self.has_curvature:
            return np.zeros(0, dtype=np.int64)
        i, l = np.nonzero(~np.eye(self.m, dtype=bool))
        return (i * self.m + l).astype(np.int64)

    def seed_keys(self, grid: EvalGrid) -> np.ndarray:
        if not self.has_curvature:
            return np.zeros(0, dtype=np.int64)
        pairs = adjacency_pairs(grid) if grid.is_lattice and grid.lattice_index is not None else neighbor_pairs(grid.points)
        return (pairs.pairs[:, 0] * self.m + pairs.pairs[:, 1]).astype(np.int64)

    def satisfied(self, theta: np.ndarray, tol: float) -> bool:
        G, c = self.base_rows()
        if G.shape[0] and (G @ theta - c).max() > tol:
            return False
        return not (self.has_curvature and self.violations(theta).max() > tol)


def check_xy(X, y):
    X = as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DomainError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DomainError("X and y must be finite")
    return X, y


def as_grid(grid, d: int) -> EvalGrid:
    if isinstance(grid, EvalGrid):
        if grid.d != d:
            raise DomainError(f"grid has dimension {grid.d} but inputs have {d}")
        return grid
    return EvalGrid.external(np.asarray(grid, dtype=float).reshape(-1, d))


def local_linear_fit(X, y, grid, bw: BandwidthSpec, kernel=None, ridge: float = 0.0) -> LocalLinearFit:
    """Unconstrained local linear fit at every evaluation point"""
    X, y = check_xy(X, y)
    grid = as_grid(grid, X.shape[1])
    W = weight_matrix(X, grid, bw, kernel).w
    system = normal_equations(X, y, grid.points, W, ridge=ridge)
    bad = np.flatnonzero(system.singular)
    if bad.size:
        raise SingularLocalDesignError(int(bad[0]), grid.points[bad[0]])
    theta = solve_normal_equations(system)
    a, b = theta[:, 0], theta[:, 1:]
    return LocalLinearFit(grid=grid, a=a, b=b, contributions=weighted_objective(X, y, grid.points, W, a, b))


def _quadratic(system, m: int, p: int) -> Tuple[sp.csc_matrix, np.ndarray]:
    P = sp.block_diag([2.0 * system.M[i] for i in range(m)], format="csc")
    q = -2.0 * system.r.ravel()
    return P, q


def _raise_for_status(solution: QpSolution, what: str) -> None:
    if solution.status is QpStatus.INFEASIBLE:
        raise InfeasibleProblemError(f"{what}: constraint set is infeasible", solution)
    if solution.status is not QpStatus.OPTIMAL:
        raise QpSolveError(
            f"{what}: solver stopped with status {solution.status.value} "
            f"(max KKT residual {solution.kkt.max():.3e})",
            solution,
        )


def _solve_shape_qp(problem: QpProblem, constraints: ShapeConstraints, grid: EvalGrid, lazy: bool, tol, dump_qp):
    G0, c0 = constraints.base_rows()
    base = QpProblem(P=problem.P, q=problem.q, G=G0, c=c0)
    diagnostics = {"base_rows": int(c0.size)}
    if constraints.has_curvature and lazy:
        result = lazy_constraint_solve(base, constraints.seed_keys(grid), constraints, tol=tol)
        solution = result.solution
        diagnostics.update(
            lazy=True,
            rounds=result.rounds_used,
            afriat_rows=result.final_row_count,
            outstanding=result.outstanding,
            objective_trace=result.objective_trace,
        )
        final = base.with_rows(*constraints.rows(result.keys))
    else:
        final = base.with_rows(*constraints.rows(constraints.all_keys()))
        solution = solve_qp(final, tol=tol)
        diagnostics.update(lazy=False, rounds=1, afriat_rows=int(constraints.all_keys().size), outstanding=0)
    if dump_qp:
        dump_problem(final, dump_qp)
    diagnostics.update(solution.report())
    return solution, diagnostics


def sckls_fit(
    X,
    y,
    grid,
    bw: BandwidthSpec,
    kernel=None,
    shape: ShapeSpec = CONCAVE_INCREASING,
    lazy: bool = True,
    tol: Optional[float] = None,
    dump_qp: Optional[str] = None,
) -> HyperplaneModel:
    """Kernel-weighted least squares over all evaluation points subject to the shape"""
    X, y = check_xy(X, y)
    grid = as_grid(grid, X.shape[1])
    kernel = as_kernel(kernel)
    W = weight_matrix(X, grid, bw, kernel).w
    return sckls_fit_weighted(X, y, grid, W, shape, bw=bw, kernel=kernel, lazy=lazy, tol=tol, dump_qp=dump_qp)


def sckls_fit_weighted(
    X,
    y,
    grid: EvalGrid,
    W: np.ndarray,
    shape: ShapeSpec,
    constraints: Optional[ShapeConstraints] = None,
    bw: Optional[BandwidthSpec] = None,
    kernel: Optional[Kernel] = None,
    lazy: bool = True,
    tol: Optional[float] = None,
    dump_qp: Optional[str] = None,
) -> HyperplaneModel:
    """SCKLS with a precomputed (m, n) weight matrix; bootstrap replicates reuse one"""
    if shape.is_trivial:
        raise DomainError("shape specification imposes no constraint; use local_linear_fit")
    tol = get_settings().qp_tol if tol is None else tol
    m, d = grid.m, grid.d
    system = normal_equations(X, y, grid.points, W)
    constraints = constraints or ShapeConstraints(grid.points, shape)

    if not system.singular.any():
        theta = solve_normal_equations(system).ravel()
        scale = max(1.0, float(np.abs(theta).max()))
        if constraints.satisfied(theta, tol * scale):
            logger.debug("Local linear fit already satisfies every shape constraint")
            T = theta.reshape(m, d + 1)
            return HyperplaneModel(
                grid=grid, a=T[:, 0].copy(), b=T[:, 1:].copy(), shape=shape, bandwidth=bw, kernel=kernel,
                diagnostics={"status": "optimal", "unconstrained_feasible": True, "rounds": 0, "afriat_rows": 0},
            )

    P, q = _quadratic(system, m, d + 1)
    problem = QpProblem(P, q, sp.csr_matrix((0, m * (d + 1))), np.zeros(0))
    solution, diagnostics = _solve_shape_qp(problem, constraints, grid, lazy, tol, dump_qp)
    _raise_for_status(solution, "SCKLS")
    T = solution.z.reshape(m, d + 1)
    constant = float(np.einsum('ij,j->', W, y * y))
    diagnostics.update(unconstrained_feasible=False, objective_value=solution.objective + constant)
    logger.debug(f"SCKLS fit: m={m}, rounds={diagnostics['rounds']}, rows={diagnostics['afriat_rows']}")
    return HyperplaneModel(
        grid=grid, a=T[:, 0].copy(), b=T[:, 1:].copy(), shape=shape, bandwidth=bw, kernel=kernel,
        diagnostics=diagnostics,
    )


def sckls_objective(X, y, model: HyperplaneModel) -> float:
    """Kernel-weighted residual sum of squares of a fitted model's planes"""
    X, y = check_xy(X, y)
    W = weight_matrix(X, model.grid, model.bandwidth, model.kernel).w
    return float(weighted_objective(X, y, model.grid.points, W, model.a, model.b).sum())


def cnls_fit(X, y, shape: ShapeSpec = CONCAVE_INCREASING, lazy: bool = True, tol: Optional[float] = None) -> HyperplaneModel:
    """Shape-constrained least squares with one plane per distinct observation"""
    X, y = check_xy(X, y)
    if X.shape[0] < 2:
        raise DomainError("CNLS needs at least two observations")
    if shape.curvature is Curvature.NONE:
        raise DomainError("CNLS requires a concave or convex curvature constraint")
    tol = get_settings().qp_tol if tol is None else tol
    U, inverse, counts = np.unique(X, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).ravel()
    w = counts.astype(float)
    y_bar = np.bincount(inverse, weights=y) / w
    if U.shape[0] < X.shape[0]:
        logger.info(f"CNLS merged {X.shape[0] - U.shape[0]} duplicated input rows")
    grid = EvalGrid.external(U)
    m, d = U.shape
    p = d + 1
    diag = np.zeros(m * p)
    diag[::p] = 2.0 * w
    q = np.zeros(m * p)
    q[::p] = -2.0 * w * y_bar
    constraints = ShapeConstraints(U, shape)
    problem = QpProblem(sp.diags(diag, format="csc"), q, sp.csr_matrix((0, m * p)), np.zeros(0))
    solution, diagnostics = _solve_shape_qp(problem, constraints, grid, lazy, tol, None)
    _raise_for_status(solution, "CNLS")
    T = solution.z.reshape(m, p)
    diagnostics.update(merged_duplicates=int(X.shape[0] - m))
    return HyperplaneModel(grid=grid, a=T[:, 0].copy(), b=T[:, 1:].copy(), shape=shape, diagnostics=diagnostics)


def linear_fit(X, y) -> Tuple[float, np.ndarray]:
    """Ordinary least-squares affine fit (intercept, slopes)"""
    X, y = check_xy(X, y)
    A = np.column_stack([np.ones(X.shape[0]), X])
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    return float(coef[0]), coef[1:]


def monotone_linear_fit(X, y) -> Tuple[float, np.ndarray]:
    """Least-squares affine fit with non-negative slopes"""
    X, y = check_xy(X, y)
    n, d = X.shape
    if n < d + 1:
        raise DomainError(f"need at least d + 1 = {d + 1} observations, got {n}")
    A = np.column_stack([np.ones(n), X])
    lower = np.concatenate([[-np.inf], np.zeros(d)])
    res = lsq_linear(A, y, bounds=(lower, np.full(d + 1, np.inf)), method="bvls", tol=1e-14)
    if not res.success:
        raise QpSolveError(f"sign-constrained least squares failed: {res.message}")
    return float(res.x[0]), res.x[1:]


def affine_model(intercept: float, slopes, grid: EvalGrid, shape: ShapeSpec) -> HyperplaneModel:
    """The single plane intercept + x'slopes expressed at every grid point"""
    slopes = np.asarray(slopes, dtype=float)
    a = intercept + grid.points @ slopes
    b = np.tile(slopes, (grid.m, 1))
    return HyperplaneModel(grid=grid, a=a, b=b, shape=shape, diagnostics={"status": "optimal"})
