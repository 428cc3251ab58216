"""Convex QP with linear inequality constraints.

    minimize  0.5 z'Pz + q'z   subject to  Gz <= c

Operator splitting (ADMM on the split Gz = s, s <= c) with Ruiz
equilibration, over-relaxation and residual-balancing step-size updates,
followed by a polish step that solves the equality-constrained KKT system
on the identified active set (dependent rows pruned by pivoted QR) and
fits nonnegative multipliers with a sparse LP. ``lazy_constraint_solve``
wraps the solver in a constraint-generation loop against a row oracle.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Tuple
import logging

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.linalg import qr
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

from sckls.config import get_settings
from sckls.errors import DomainError

logger = logging.getLogger(__name__)

_SIGMA = 1e-6
_ALPHA = 1.6
_RHO0 = 0.1
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_CHECK_EVERY = 10
_RUIZ_ITERS = 10
_POLISH_PASSES = 60
_REFINE_STEPS = 50
_REFINE_TOL = 1e-13
_RANK_TOL = 1e-10
_LP_TOL = 1e-9
_NEAR_ACTIVE = 10.0
_EPS_SHRINK = 0.1
_EPS_INF = 1e-5


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    G: sp.csr_matrix
    c: np.ndarray

    def __post_init__(self):
        P = sp.csc_matrix(self.P, dtype=float)
        G = sp.csr_matrix(self.G, dtype=float)
        q = np.asarray(self.q, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        n = q.size
        if P.shape != (n, n):
            raise DomainError(f"P has shape {P.shape}, expected ({n}, {n})")
        if G.shape[1] != n or G.shape[0] != c.size:
            raise DomainError(f"G has shape {G.shape} but q has {n} and c has {c.size} entries")
        asym = abs(P - P.T).max() if P.nnz else 0.0
        if asym > 1e-12 * max(1.0, abs(P).max() if P.nnz else 0.0):
            raise DomainError(f"P is not symmetric (max asymmetry {asym:.3e})")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def k(self) -> int:
        return self.c.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)

    def with_rows(self, G_extra, c_extra) -> "QpProblem":
        if G_extra is None or G_extra.shape[0] == 0:
            return self
        return QpProblem(
            P=self.P,
            q=self.q,
            G=sp.vstack([self.G, sp.csr_matrix(G_extra)], format="csr"),
            c=np.concatenate([self.c, np.asarray(c_extra, dtype=float)]),
        )

    def scale(self) -> float:
        """Magnitude used to turn absolute tolerances into relative ones"""
        parts = [1.0, np.abs(self.q).max(initial=0.0), np.abs(self.c).max(initial=0.0)]
        return float(max(parts))


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    dual: np.ndarray
    status: QpStatus
    kkt: KktResiduals
    iterations: int = 0
    polished: bool = False
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    certificate: Optional[np.ndarray] = None

    def report(self) -> dict:
        return {
            "status": self.status.value,
            "objective": self.objective,
            "iterations": self.iterations,
            "polished": self.polished,
            "active_rows": int(self.active.size),
            "stationarity": self.kkt.stationarity,
            "primal": self.kkt.primal,
            "complementarity": self.kkt.complementarity,
        }


def kkt_residuals(problem: QpProblem, z, dual) -> KktResiduals:
    """Infinity norms of stationarity, primal infeasibility and complementarity"""
    z = np.asarray(z, dtype=float).ravel()
    lam = np.asarray(dual, dtype=float).ravel()
    if z.size != problem.n or lam.size != problem.k:
        raise DomainError("z / dual dimensions do not match the problem")
    slack = problem.G @ z - problem.c
    grad = problem.P @ z + problem.q + problem.G.T @ lam
    return KktResiduals(
        stationarity=float(np.abs(grad).max(initial=0.0)),
        primal=float(np.maximum(slack, 0.0).max(initial=0.0)),
        complementarity=float(np.abs(lam * slack).max(initial=0.0)),
    )


def _col_norm(M: sp.spmatrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_norm(M: sp.spmatrix) -> np.ndarray:
    if M.shape[1] == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _inv_sqrt(v: np.ndarray) -> np.ndarray:
    v = np.where(v > 1e-8, v, 1.0)
    return 1.0 / np.sqrt(np.clip(v, 1e-4, 1e4))


class _Scaled:
    """Ruiz-equilibrated copy of a problem: x = D xs, y = E ys / cost"""

    def __init__(self, problem: QpProblem):
        P, G, q = problem.P.copy(), problem.G.copy(), problem.q.copy()
        D = np.ones(problem.n)
        E = np.ones(problem.k)
        for _ in range(_RUIZ_ITERS):
            dx = _inv_sqrt(np.maximum(_col_norm(P), _col_norm(G)))
            dc = _inv_sqrt(_row_norm(G))
            Dx, Dc = sp.diags(dx), sp.diags(dc)
            P = (Dx @ P @ Dx).tocsc()
            G = (Dc @ G @ Dx).tocsr()
            q = dx * q
            D *= dx
            E *= dc
        pn = _col_norm(P)
        cost = max(pn.mean() if pn.size else 0.0, np.abs(q).max(initial=0.0))
        cost = 1.0 / float(np.clip(cost if cost > 1e-8 else 1.0, 1e-4, 1e4))
        self.P = (P * cost).tocsc()
        self.q = q * cost
        self.G = G
        self.c = E * problem.c
        self.D, self.E, self.cost = D, E, cost


def _factor(S: _Scaled, rho: float):
    n, k = S.P.shape[0], S.G.shape[0]
    K = sp.bmat(
        [[S.P + _SIGMA * sp.identity(n), S.G.T], [S.G, -(1.0 / rho) * sp.identity(k)]],
        format="csc",
    )
    return splu(K)


def _admm(problem: QpProblem, S: _Scaled, eps: float, max_iter: int, warm, rho: float = _RHO0):
    """Returns scaled (x, z, y), iterations used, a Farkas ray if infeasible, and the final step size"""
    n, k = problem.n, problem.k
    x, z, y = np.zeros(n), np.zeros(k), np.zeros(k)
    if warm is not None:
        x = warm[0] / S.D
        m = min(warm[1].size, k)
        y[:m] = warm[1][:m] * S.cost / S.E[:m]
        z = np.minimum(S.G @ x, S.c)
    lu = _factor(S, rho)
    y_last = y.copy()
    inv_D = 1.0 / (S.D * S.cost)
    inv_E = 1.0 / S.E
    for it in range(1, max_iter + 1):
        sol = lu.solve(np.concatenate([_SIGMA * x - S.q, z - y / rho]))
        xt, nu = sol[:n], sol[n:]
        zt = z + (nu - y) / rho
        x = _ALPHA * xt + (1 - _ALPHA) * x
        zr = _ALPHA * zt + (1 - _ALPHA) * z
        z = np.minimum(zr + y / rho, S.c)
        y = y + rho * (zr - z)
        if it % _CHECK_EVERY:
            continue

        Ax, Px, Aty = S.G @ x, S.P @ x, S.G.T @ y
        r_prim = np.abs((Ax - z) * inv_E).max(initial=0.0)
        r_dual = np.abs((Px + S.q + Aty) * inv_D).max(initial=0.0)
        e_prim = eps * (1.0 + max(np.abs(Ax * inv_E).max(initial=0.0), np.abs(z * inv_E).max(initial=0.0)))
        e_dual = eps * (1.0 + max(
            np.abs(Px * inv_D).max(initial=0.0),
            np.abs(Aty * inv_D).max(initial=0.0),
            np.abs(S.q * inv_D).max(initial=0.0),
        ))
        if r_prim <= e_prim and r_dual <= e_dual:
            logger.debug(f"ADMM converged after {it} iterations (rho={rho:.3g})")
            return x, z, y, it, None, rho

        # y only grows along a ray when the constraint set is empty
        dy_scaled = y - y_last
        y_last = y.copy()
        dy = dy_scaled * S.E
        norm_dy = np.abs(dy).max(initial=0.0)
        if norm_dy > 1e-12:
            Atdy = np.abs((S.G.T @ dy_scaled) / S.D).max(initial=0.0)
            if Atdy <= _EPS_INF * norm_dy and problem.c @ np.maximum(dy, 0.0) < -_EPS_INF * norm_dy:
                return x, z, y, it, dy / norm_dy, rho

        prim_rel = np.abs(Ax - z).max(initial=0.0) / max(
            np.abs(Ax).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-12)
        dual_rel = np.abs(Px + S.q + Aty).max(initial=0.0) / max(
            np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(S.q).max(initial=0.0), 1e-12)
        if prim_rel > 0 and dual_rel > 0:
            rho_new = float(np.clip(rho * np.sqrt(prim_rel / dual_rel), _RHO_MIN, _RHO_MAX))
            if rho_new > 5 * rho or rho_new < rho / 5:
                rho = rho_new
                lu = _factor(S, rho)
    return x, z, y, max_iter, None, rho


def _kkt_solve(problem: QpProblem, active: np.ndarray, tikhonov: float):
    """Equality-constrained KKT solve on ``active`` rows with iterative refinement"""
    n, a = problem.n, active.size
    delta = tikhonov * max(1.0, float(abs(problem.P).max()))
    if a:
        G_A = problem.G[active]
        K_true = sp.bmat([[problem.P, G_A.T], [G_A, sp.csc_matrix((a, a))]], format="csc")
        K_reg = sp.bmat(
            [[problem.P + delta * sp.identity(n), G_A.T], [G_A, -delta * sp.identity(a)]],
            format="csc",
        )
        rhs = np.concatenate([-problem.q, problem.c[active]])
    else:
        K_true = problem.P
        K_reg = (problem.P + delta * sp.identity(n)).tocsc()
        rhs = -problem.q
    lu = splu(K_reg)
    sol = lu.solve(rhs)
    rhs_norm = max(1.0, float(np.abs(rhs).max(initial=0.0)))
    # refinement against the unregularized matrix also converges on consistent singular systems
    for _ in range(_REFINE_STEPS):
        residual = rhs - K_true @ sol
        if np.abs(residual).max(initial=0.0) <= _REFINE_TOL * rhs_norm * max(1.0, float(np.abs(sol).max())):
            break
        sol = sol + lu.solve(residual)
    if not np.all(np.isfinite(sol)):
        raise RuntimeError("non-finite KKT solution")
    return sol[:n], sol[n:]


def _independent_rows(problem: QpProblem, active: np.ndarray) -> np.ndarray:
    """Subset of ``active`` with linearly independent constraint rows (pivoted QR)"""
    if active.size == 0:
        return active
    R, piv = qr(problem.G[active].toarray().T, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return active[:0]
    rank = int(np.count_nonzero(diag > _RANK_TOL * diag[0]))
    return np.sort(active[piv[:rank]])


def _solve_active(problem: QpProblem, active: np.ndarray, tikhonov: float, tol_abs: float):
    """Primal-dual point with ``active`` rows held at equality; None when the solve breaks down"""
    try:
        z, lam = _kkt_solve(problem, active, tikhonov)
    except RuntimeError as exc:
        logger.debug(f"polish KKT solve failed: {exc}")
        return None
    slack = problem.G[active] @ z - problem.c[active]
    if np.abs(slack).max(initial=0.0) <= tol_abs:
        return z, lam, active
    independent = _independent_rows(problem, active)
    logger.debug(f"dropping {active.size - independent.size} dependent rows from the polish system")
    try:
        z, lam = _kkt_solve(problem, independent, tikhonov)
    except RuntimeError as exc:
        logger.debug(f"polish KKT solve failed: {exc}")
        return None
    return z, lam, independent


def _refine_multipliers(G_T: sp.csc_matrix, grad: np.ndarray, lam: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Least-squares correction of the multipliers on a basic support"""
    B = G_T[:, support]
    try:
        lu = splu((B.T @ B).tocsc())
    except RuntimeError:
        return lam
    values = lam[support].copy()
    for _ in range(2):
        values = values + lu.solve(B.T @ (-grad - B @ values))
    if not np.all(np.isfinite(values)):
        return lam
    candidate = lam.copy()
    candidate[support] = np.maximum(values, 0.0)
    before = np.abs(G_T @ lam + grad).max(initial=0.0)
    after = np.abs(G_T @ candidate + grad).max(initial=0.0)
    return candidate if after < before else lam


def _nonnegative_multipliers(problem: QpProblem, active: np.ndarray, grad: np.ndarray):
    """Multipliers lam >= 0 on ``active`` minimizing |G_A'lam + grad|_1

    Returns ``(lam, direction)`` where ``direction`` is the dual of the fit:
    G_A direction <= 0 and grad'direction < 0 whenever the fit is not exact,
    so rows with G_i direction < 0 are the ones to release.
    """
    G_T = problem.G[active].T.tocsc()
    n, a = G_T.shape
    eye = sp.identity(n, format="csc")
    result = linprog(
        np.concatenate([np.zeros(a), np.ones(2 * n)]),
        A_eq=sp.hstack([G_T, -eye, eye], format="csc"),
        b_eq=-grad,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": _LP_TOL, "dual_feasibility_tolerance": _LP_TOL},
    )
    if result.status != 0:
        logger.debug(f"multiplier fit failed: {result.message}")
        return None
    lam = np.maximum(result.x[:a], 0.0)
    support = np.flatnonzero(lam > 0.0)
    if support.size:
        lam = _refine_multipliers(G_T, grad, lam, support)
    return lam, np.asarray(result.eqlin.marginals, dtype=float)


def _polish(problem: QpProblem, z0: np.ndarray, y0: np.ndarray, tol_abs: float, eps: float, tikhonov: float):
    """Active-set refinement seeded by the splitting iterate

    The seed holds rows with a clearly positive dual and rows whose slack is
    within the splitting accuracy. Each pass solves the equality system,
    adds violated rows, fits nonnegative multipliers and releases the rows
    the fit cannot support. Returns the best ``(z, dual, active)`` seen, or
    None when no pass produced a point.
    """
    G, c = problem.G, problem.c
    y_scale = max(1.0, float(np.abs(y0).max(initial=0.0)))
    reach = _row_norm(G) * max(1.0, float(np.abs(z0).max(initial=0.0))) + np.abs(c)
    near = G @ z0 - c >= -_NEAR_ACTIVE * eps * np.maximum(1.0, reach)
    active = np.flatnonzero((y0 > eps * y_scale) | near)
    best, best_err = None, np.inf
    for _ in range(_POLISH_PASSES):
        solved = _solve_active(problem, active, tikhonov, tol_abs)
        if solved is None:
            return best
        z, lam, active = solved
        slack = G @ z - c
        violated = np.setdiff1d(np.flatnonzero(slack > tol_abs), active)
        if violated.size:
            active = np.union1d(active, violated)
            continue

        dual = np.zeros(problem.k)
        dual[active] = np.maximum(lam, 0.0)
        kkt = kkt_residuals(problem, z, dual)
        direction = None
        if kkt.max() > tol_abs and active.size:
            fit = _nonnegative_multipliers(problem, active, problem.P @ z + problem.q)
            if fit is not None:
                lam_fit, direction = fit
                dual_fit = np.zeros(problem.k)
                dual_fit[active] = lam_fit
                kkt_fit = kkt_residuals(problem, z, dual_fit)
                if kkt_fit.max() < kkt.max():
                    dual, kkt = dual_fit, kkt_fit
        if kkt.max() < best_err:
            best, best_err = (z, dual, active), kkt.max()
        if kkt.max() <= tol_abs or direction is None:
            return best

        moves = G[active] @ direction
        release = active[moves < -_RANK_TOL * max(1.0, float(np.abs(moves).max(initial=0.0)))]
        if release.size == 0:
            return best
        active = np.setdiff1d(active, release)
    return best


def _finish(problem, z, dual, tol_abs, iterations, polished, active) -> QpSolution:
    kkt = kkt_residuals(problem, z, dual)
    status = QpStatus.OPTIMAL if kkt.max() <= tol_abs else QpStatus.MAX_ITER
    return QpSolution(
        z=z, objective=problem.objective(z), dual=dual, status=status, kkt=kkt,
        iterations=iterations, polished=polished, active=active,
    )


def solve_qp(
    problem: QpProblem,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> QpSolution:
    """Solve the QP; Optimal means every KKT residual is within tol * problem.scale()

    When polishing misses, the splitting tolerance shrinks and the iterate
    continues from where it stopped, until a point passes the KKT check or
    ``max_iter`` is spent. The best point seen is returned either way.
    """
    s = get_settings()
    tol = s.qp_tol if tol is None else tol
    max_iter = s.qp_max_iter if max_iter is None else max_iter
    tol_abs = tol * problem.scale()

    if problem.k == 0:
        z, _ = _kkt_solve(problem, np.zeros(0, dtype=int), s.tikhonov)
        return _finish(problem, z, np.zeros(0), tol_abs, 0, True, np.zeros(0, dtype=int))

    S = _Scaled(problem)
    used = 0
    eps = max(s.qp_pre_polish_tol, tol)
    floor = _EPS_SHRINK * tol
    start = warm_start
    rho = _RHO0
    best: Optional[QpSolution] = None
    while True:
        budget = max_iter - used
        x, _, ys, it, ray, rho = _admm(problem, S, eps, budget, start, rho)
        used += it
        z = S.D * x
        y = S.E * ys / S.cost
        if ray is not None:
            logger.warning("QP is infeasible: splitting iterate diverges along a Farkas ray")
            kkt = kkt_residuals(problem, z, np.maximum(y, 0.0))
            return QpSolution(
                z=z, objective=problem.objective(z), dual=np.maximum(y, 0.0),
                status=QpStatus.INFEASIBLE, kkt=kkt, iterations=used, certificate=ray,
            )
        candidate = _finish(problem, z, np.maximum(y, 0.0), tol_abs, used, False, np.flatnonzero(y > 0))
        polished = _polish(problem, z, y, tol_abs, eps, s.tikhonov)
        if polished is not None:
            zp, dual, active = polished
            refined = _finish(problem, zp, dual, tol_abs, used, True, active)
            if refined.kkt.max() <= candidate.kkt.max():
                candidate = refined
        if best is None or candidate.kkt.max() < best.kkt.max():
            best = candidate
        best.iterations = used
        if best.status is QpStatus.OPTIMAL:
            return best
        if used >= max_iter or (eps <= floor and it < budget):
            break
        logger.debug(f"polish missed at eps={eps:.1e} after {used} iterations; tightening")
        eps = max(eps * _EPS_SHRINK, floor)
        start = (z, y)
    logger.warning(
        f"QP stopped without an optimal point after {used} iterations "
        f"(kkt={best.kkt.max():.3e}, tol={tol_abs:.3e})"
    )
    return best


class RowOracle(Protocol):
    """A family of lazily added rows ``G_key z <= c_key``, addressed by integer keys"""

    def rows(self, keys: np.ndarray) -> Tuple[sp.csr_matrix, np.ndarray]:
        ...

    def violated(self, z: np.ndarray, tol: float) -> np.ndarray:
        ...


@dataclass
class LazySolution:
    solution: QpSolution
    rounds_used: int
    final_row_count: int
    outstanding: int
    keys: np.ndarray
    objective_trace: List[float]


def lazy_constraint_solve(
    problem: QpProblem,
    initial_rows: Iterable[int],
    oracle: RowOracle,
    tol: Optional[float] = None,
    max_rounds: Optional[int] = None,
) -> LazySolution:
    """Constraint generation: solve with a row subset, add every violated row, repeat.

    ``problem`` carries the rows that are always present; the lazy family
    rows are appended after them in the order they were added.
    """
    s = get_settings()
    tol = s.qp_tol if tol is None else tol
    max_rounds = s.lazy_max_rounds if max_rounds is None else max_rounds
    keys = np.unique(np.asarray(list(initial_rows), dtype=np.int64))
    G_lazy, c_lazy = oracle.rows(keys)
    trace: List[float] = []
    warm = None
    violated = np.zeros(0, dtype=np.int64)
    for rnd in range(1, max_rounds + 1):
        current = problem.with_rows(G_lazy, c_lazy)
        solution = solve_qp(current, tol=tol, warm_start=warm)
        trace.append(solution.objective)
        if solution.status is QpStatus.INFEASIBLE:
            return LazySolution(solution, rnd, keys.size, 0, keys, trace)
        check_tol = 10 * tol * max(1.0, float(np.abs(solution.z).max(initial=0.0)))
        violated = np.setdiff1d(oracle.violated(solution.z, check_tol), keys)
        logger.debug(f"lazy round {rnd}: {keys.size} rows, {violated.size} violated")
        if violated.size == 0:
            logger.info(f"Constraint generation finished in {rnd} round(s) with {keys.size} lazy rows")
            return LazySolution(solution, rnd, keys.size, 0, keys, trace)
        G_new, c_new = oracle.rows(violated)
        G_lazy = sp.vstack([G_lazy, G_new], format="csr")
        c_lazy = np.concatenate([c_lazy, c_new])
        keys = np.concatenate([keys, violated])
        warm = (solution.z, solution.dual)
    logger.warning(f"Constraint generation hit {max_rounds} rounds with {violated.size} rows still violated")
    solution.status = QpStatus.MAX_ITER
    return LazySolution(solution, max_rounds, keys.size, int(violated.size), keys, trace)


def dump_problem(problem: QpProblem, prefix) -> List[Path]:
    """Write P and G as Matrix Market files and q, c as plain text columns"""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [prefix.parent / f"{prefix.name}.{part}" for part in ("P.mtx", "G.mtx", "q.txt", "c.txt")]
    mmwrite(str(paths[0]), problem.P, symmetry="symmetric")
    mmwrite(str(paths[1]), problem.G.tocoo())
    np.savetxt(paths[2], problem.q, fmt="%.17g")
    np.savetxt(paths[3], problem.c, fmt="%.17g")
    logger.info(f"QP written to {prefix}.*")
    return paths
