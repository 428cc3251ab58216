"""Wild-bootstrap tests of an imposed shape and of affinity."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional
import logging

import numpy as np
from joblib import Parallel, delayed

from sckls.config import get_settings
from sckls.errors import (
    BootstrapAbortedError,
    DomainError,
    ScklsError,
    ShapeConsistencyError,
    SingularLocalDesignError,
)
from sckls.services import seeding
from sckls.services.estimators import (
    Curvature,
    Monotonicity,
    ShapeConstraints,
    ShapeSpec,
    as_grid,
    check_xy,
    linear_fit,
    local_linear_fit,
    monotone_linear_fit,
    sckls_fit_weighted,
)
from sckls.services.kernel_weights import BandwidthSpec, as_kernel, weight_matrix
from sckls.services.local_linear import normal_equations, solve_normal_equations, weighted_objective

logger = logging.getLogger(__name__)

RADICAND_FLOOR = -1e-10
# Affinity distances below this multiple of (1 + mean y^2) are rounding noise.
AFFINE_ROUNDING = 1e-20

_SQRT5 = np.sqrt(5.0)
_MAMMEN_LOW = (1.0 - _SQRT5) / 2.0
_MAMMEN_HIGH = (1.0 + _SQRT5) / 2.0
_MAMMEN_P_LOW = (_SQRT5 + 1.0) / (2.0 * _SQRT5)


class BootstrapKind(str, Enum):
    RADEMACHER = "rademacher"
    MAMMEN = "mammen"


@dataclass(frozen=True)
class BootstrapScheme:
    kind: BootstrapKind = BootstrapKind.RADEMACHER
    B: int = 200

    def __post_init__(self):
        object.__setattr__(self, "kind", BootstrapKind(self.kind))
        if int(self.B) < 1:
            raise DomainError(f"number of bootstrap replicates must be positive, got {self.B}")
        if self.B < 100:
            logger.warning(f"B={self.B} bootstrap replicates; at least 100 are recommended")

    def weights(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n draws with mean 0 and variance 1"""
        if self.kind is BootstrapKind.RADEMACHER:
            return np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return np.where(rng.random(n) < _MAMMEN_P_LOW, _MAMMEN_LOW, _MAMMEN_HIGH)


@dataclass
class TestResult:
    statistic: float
    bootstrap_stats: np.ndarray
    p_value: float
    alpha: float
    reject: bool
    delta_n: float
    seed: int
    scheme: BootstrapScheme
    failed: List[int] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_document(self) -> dict:
        return {
            "statistic": float(self.statistic),
            "p_value": float(self.p_value),
            "alpha": float(self.alpha),
            "reject": bool(self.reject),
            "delta_n": float(self.delta_n),
            "seed": int(self.seed),
            "scheme": self.scheme.kind.value,
            "B": int(self.scheme.B),
            "failed_replicates": [int(k) for k in self.failed],
            "finite_replicates": int(self.bootstrap_stats.size),
            "p_value_denominator": "finite_replicates",
            "bootstrap_stats": [float(t) for t in self.bootstrap_stats],
            "details": self.details,
        }


def p_value(statistic: float, bootstrap_stats: np.ndarray, delta_n: float = 0.0) -> float:
    """Share of replicates with statistic <= T_k + delta_n.

    Only finite replicates are passed in, so the denominator is their count,
    which is below B when some bootstrap refits failed.
    """
    stats = np.asarray(bootstrap_stats, dtype=float)
    if stats.size == 0:
        raise DomainError("no bootstrap statistics to compare against")
    return float(np.count_nonzero(statistic <= stats + delta_n)) / stats.size


def delta_correction(n: int, d: int, c: Optional[float] = None) -> float:
    """c * n^(-2/(4+d)) * log n"""
    c = get_settings().delta_c if c is None else c
    return float(c * n ** (-2.0 / (4 + d)) * np.log(n))


class ShapeStatistic:
    """T_n for a fixed design: weights, normalizer and constraint family are computed once"""

    def __init__(self, X, grid, bw: BandwidthSpec, kernel=None, shape: ShapeSpec = None, lazy: bool = True):
        self.X = X
        self.grid = grid
        self.bw = bw
        self.kernel = as_kernel(kernel)
        self.shape = shape
        self.lazy = lazy
        weights = weight_matrix(X, grid, bw, self.kernel)
        self.W = weights.w
        self.normalizer = grid.m * X.shape[0] * weights.normalizer(bw, X.shape[1])
        self.constraints = ShapeConstraints(grid.points, shape)

    def objectives(self, y: np.ndarray):
        """(constrained, unconstrained) kernel-weighted residual sums of squares"""
        system = normal_equations(self.X, y, self.grid.points, self.W)
        theta = solve_normal_equations(system)
        if system.singular.any():
            i = int(np.flatnonzero(system.singular)[0])
            raise SingularLocalDesignError(i, self.grid.points[i])
        r_tilde = float(weighted_objective(self.X, y, self.grid.points, self.W, theta[:, 0], theta[:, 1:]).sum())
        model = sckls_fit_weighted(
            self.X, y, self.grid, self.W, self.shape, constraints=self.constraints,
            bw=self.bw, kernel=self.kernel, lazy=self.lazy,
        )
        r_hat = float(weighted_objective(self.X, y, self.grid.points, self.W, model.a, model.b).sum())
        return r_hat, r_tilde

    def __call__(self, y: np.ndarray) -> float:
        r_hat, r_tilde = self.objectives(y)
        radicand = (r_hat - r_tilde) / self.normalizer
        if radicand < RADICAND_FLOOR:
            raise ShapeConsistencyError(
                f"constrained objective {r_hat:.12g} is below the unconstrained {r_tilde:.12g}"
            )
        return float(np.sqrt(max(radicand, 0.0)))


def shape_test_statistic(X, y, grid, bw: BandwidthSpec, kernel=None, shape: ShapeSpec = None) -> float:
    """sqrt((r_hat^2 - r_tilde^2) / (m n h^d))"""
    X, y = check_xy(X, y)
    grid = as_grid(grid, X.shape[1])
    return ShapeStatistic(X, grid, bw, kernel, shape or ShapeSpec.parse("concave-increasing", X.shape[1]))(y)


def _run_replicates(
    statistic: Callable[[np.ndarray], float],
    make_response: Callable[[int], np.ndarray],
    B: int,
    threads: Optional[int],
):
    def one(k: int) -> float:
        try:
            return statistic(make_response(k))
        except ScklsError as exc:
            logger.warning(f"bootstrap replicate {k} failed: {exc}")
            return np.nan

    n_jobs = threads or get_settings().threads
    values = np.asarray(Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(k) for k in range(B)), dtype=float)
    failed = np.flatnonzero(np.isnan(values))
    limit = get_settings().bootstrap_failure_fraction
    if failed.size > limit * B:
        raise BootstrapAbortedError(
            f"{failed.size} of {B} bootstrap replicates failed (limit {limit:.0%})"
        )
    return values[~np.isnan(values)], failed.tolist()


def _result(statistic, stats, failed, alpha, delta_n, seed, scheme, details) -> TestResult:
    p = p_value(statistic, stats, delta_n)
    logger.info(f"Test statistic {statistic:.6g}, p-value {p:.4f} over {stats.size} replicates")
    return TestResult(
        statistic=float(statistic),
        bootstrap_stats=stats,
        p_value=p,
        alpha=float(alpha),
        reject=p < alpha,
        delta_n=float(delta_n),
        seed=int(seed),
        scheme=scheme,
        failed=failed,
        details=details,
    )


def wild_bootstrap_shape_test(
    X,
    y,
    grid,
    bw: BandwidthSpec,
    kernel=None,
    shape: Optional[ShapeSpec] = None,
    scheme: BootstrapScheme = BootstrapScheme(),
    alpha: float = 0.05,
    seed: int = 0,
    use_delta: bool = False,
    recentre: bool = False,
    threads: Optional[int] = None,
) -> TestResult:
    """Wild bootstrap of the local-linear residuals under the unconstrained fit.

    Replicate k uses y_k = u_k * e (or g_tilde + u_k * e with ``recentre``)
    where the weights u_k come from the counter stream (seed, k).
    """
    X, y = check_xy(X, y)
    grid = as_grid(grid, X.shape[1])
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    shape = shape or ShapeSpec.parse("concave-increasing", X.shape[1])
    statistic = ShapeStatistic(X, grid, bw, kernel, shape)
    T_n = statistic(y)

    fitted = local_linear_fit(X, y, X, bw, statistic.kernel).a
    residuals = y - fitted
    base = fitted if recentre else np.zeros_like(y)
    n = y.size

    def response(k: int) -> np.ndarray:
        u = scheme.weights(seeding.stream(seed, seeding.BOOTSTRAP, k), n)
        return base + u * residuals

    stats, failed = _run_replicates(statistic, response, scheme.B, threads)
    delta_n = delta_correction(n, X.shape[1]) if use_delta else 0.0
    details = {
        "test": "shape",
        "shape": shape.label(),
        "recentre": bool(recentre),
        "bandwidth": bw.describe(),
        "kernel": statistic.kernel.value,
        "grid_size": grid.m,
        "generator": seeding.GENERATOR_NAME,
    }
    return _result(T_n, stats, failed, alpha, delta_n, seed, scheme, details)


class AffinityStatistic:
    """max of the mean squared gaps between the convex / concave fits and the affine fit"""

    def __init__(self, X, grid, bw: BandwidthSpec, kernel=None, monotone: bool = False):
        self.X = X
        self.grid = grid
        self.bw = bw
        self.kernel = as_kernel(kernel)
        self.monotone = monotone
        mono = (Monotonicity.INCREASING if monotone else Monotonicity.FREE,) * X.shape[1]
        self.shapes = [ShapeSpec(Curvature.CONVEX, mono), ShapeSpec(Curvature.CONCAVE, mono)]
        self.constraints = [ShapeConstraints(grid.points, s) for s in self.shapes]
        self.W = weight_matrix(X, grid, bw, self.kernel).w

    def affine(self, y: np.ndarray):
        return monotone_linear_fit(self.X, y) if self.monotone else linear_fit(self.X, y)

    def __call__(self, y: np.ndarray) -> float:
        intercept, slopes = self.affine(y)
        g_lin = intercept + self.grid.points @ slopes
        gaps = []
        for shape, constraints in zip(self.shapes, self.constraints):
            model = sckls_fit_weighted(
                self.X, y, self.grid, self.W, shape, constraints=constraints, bw=self.bw, kernel=self.kernel,
            )
            gaps.append(float(np.mean((model.a - g_lin) ** 2)))
        value = max(gaps)
        return 0.0 if value <= AFFINE_ROUNDING * (1.0 + float(np.mean(y * y))) else value


def affinity_test(
    X,
    y,
    grid,
    bw: BandwidthSpec,
    kernel=None,
    scheme: BootstrapScheme = BootstrapScheme(),
    alpha: float = 0.05,
    seed: int = 0,
    monotone_variant: bool = False,
    homoscedastic: bool = False,
    threads: Optional[int] = None,
) -> TestResult:
    """Bootstrap test of H0: the regression function is affine.

    Residuals come from the affine fit. Wild replicates multiply them by
    bootstrap weights; ``homoscedastic`` resamples them with replacement
    instead. The monotone variant keeps the affine part in every replicate
    since the sign constraints are not invariant to it.
    """
    X, y = check_xy(X, y)
    grid = as_grid(grid, X.shape[1])
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    statistic = AffinityStatistic(X, grid, bw, kernel, monotone_variant)
    T_n = statistic(y)

    intercept, slopes = statistic.affine(y)
    fitted = intercept + X @ slopes
    residuals = y - fitted
    base = fitted if monotone_variant else np.zeros_like(y)
    n = y.size

    def response(k: int) -> np.ndarray:
        rng = seeding.stream(seed, seeding.BOOTSTRAP, k)
        if homoscedastic:
            return base + residuals[rng.integers(0, n, size=n)]
        return base + scheme.weights(rng, n) * residuals

    stats, failed = _run_replicates(statistic, response, scheme.B, threads)
    details = {
        "test": "affinity",
        "monotone_variant": bool(monotone_variant),
        "resampling": "ordinary" if homoscedastic else "wild",
        "bandwidth": bw.describe(),
        "kernel": statistic.kernel.value,
        "grid_size": grid.m,
        "generator": seeding.GENERATOR_NAME,
    }
    return _result(T_n, stats, failed, alpha, 0.0, seed, scheme, details)
