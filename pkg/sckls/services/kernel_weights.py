"""Kernel functions, weight matrices, k-NN radii and leave-one-out selection."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union
import logging

import numpy as np
from joblib import Parallel, delayed

from sckls.config import get_settings
from sckls.errors import ConstantColumnError, DegenerateGridError, DomainError
from sckls.services.local_linear import as_inputs, as_points, normal_equations, solve_normal_equations

logger = logging.getLogger(__name__)

_GAUSS_NORM = 1.0 / np.sqrt(2.0 * np.pi)


class Kernel(str, Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"


@dataclass(frozen=True)
class BandwidthSpec:
    """Either a fixed per-dimension bandwidth ``h`` or a k-NN count ``k``"""

    h: Optional[tuple] = None
    k: Optional[int] = None

    def __post_init__(self):
        if (self.h is None) == (self.k is None):
            raise DomainError("bandwidth must be exactly one of fixed h or knn k")
        if self.h is not None:
            h = tuple(float(v) for v in np.atleast_1d(self.h))
            if not all(np.isfinite(v) and v > 0 for v in h):
                raise DomainError(f"every bandwidth h_j must be positive and finite, got {h}")
            object.__setattr__(self, "h", h)
        if self.k is not None and int(self.k) < 1:
            raise DomainError(f"knn k must be a positive integer, got {self.k}")

    @classmethod
    def fixed(cls, h: Union[float, Sequence[float]]) -> "BandwidthSpec":
        return cls(h=tuple(np.atleast_1d(np.asarray(h, dtype=float))))

    @classmethod
    def knn(cls, k: int) -> "BandwidthSpec":
        return cls(k=int(k))

    @property
    def is_knn(self) -> bool:
        return self.k is not None

    def h_vector(self, d: int) -> np.ndarray:
        """Per-dimension bandwidth, broadcasting a scalar to ``d`` entries"""
        h = np.asarray(self.h, dtype=float)
        if h.size == 1:
            return np.full(d, h[0])
        if h.size != d:
            raise DomainError(f"bandwidth has {h.size} entries but the inputs have {d} dimensions")
        return h

    def describe(self) -> dict:
        if self.is_knn:
            return {"mode": "knn", "k": self.k}
        return {"mode": "fixed", "h": list(self.h)}


@dataclass(frozen=True)
class WeightMatrix:
    """w[i, j] = kernel weight of observation j at evaluation point i"""

    w: np.ndarray
    radii: Optional[np.ndarray] = field(default=None)

    def normalizer(self, bw: BandwidthSpec, d: int) -> float:
        """h^d for fixed bandwidths; (geometric mean radius)^d for k-NN"""
        if bw.is_knn:
            r = self.radii[self.radii > 0]
            return float(np.exp(np.mean(np.log(r))) ** d) if r.size else 1.0
        return float(np.prod(bw.h_vector(d)))


def as_kernel(kernel: Union[Kernel, str, None]) -> Kernel:
    if kernel is None:
        return Kernel(get_settings().kernel)
    try:
        return Kernel(kernel)
    except ValueError:
        raise DomainError(f"unknown kernel '{kernel}'; expected gaussian or epanechnikov")


def kernel_1d(t: np.ndarray, kernel: Kernel) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if kernel is Kernel.GAUSSIAN:
        return _GAUSS_NORM * np.exp(-0.5 * t * t)
    return np.where(np.abs(t) <= 1.0, 0.75 * (1.0 - t * t), 0.0)


def product_kernel_weight(u: Sequence[float], kernel: Union[Kernel, str] = Kernel.GAUSSIAN) -> float:
    """prod_k K(u_k)"""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.all(np.isfinite(u)):
        raise DomainError(f"kernel argument must be finite, got {u.tolist()}")
    return float(np.prod(kernel_1d(u, as_kernel(kernel))))


def pairwise_distances(X: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum('ijk,ijk->ij', diff, diff))


def knn_radii(X: np.ndarray, points, k: int, exclude_self: bool = False) -> np.ndarray:
    """Distance from each point to its k-th nearest observation.

    Coincident observations (distance 0) count. With ``exclude_self`` the
    points must be the observations themselves and each one's own entry
    is ignored (leave-one-out radii).
    """
    X = as_inputs(X)
    D = pairwise_distances(X, as_points(points, X.shape[1]))
    if exclude_self:
        np.fill_diagonal(D, np.inf)
    available = D.shape[1] - (1 if exclude_self else 0)
    if not 1 <= k <= available:
        raise DomainError(f"knn k must lie in [1, {available}], got {k}")
    return np.partition(D, k - 1, axis=1)[:, k - 1]


def _knn_weights(D: np.ndarray, R: np.ndarray, kernel: Kernel) -> np.ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(D == 0, 0.0, D / R[:, None])
    return kernel_1d(ratio, kernel)


def _check_rows(W: np.ndarray, points: np.ndarray) -> None:
    empty = np.flatnonzero(~(W.sum(axis=1) > 0))
    if empty.size:
        raise DegenerateGridError(int(empty[0]), points[empty[0]])


def weight_matrix(X: np.ndarray, grid, bw: BandwidthSpec, kernel: Union[Kernel, str, None] = None) -> WeightMatrix:
    X = as_inputs(X)
    points = as_points(grid, X.shape[1])
    kernel = as_kernel(kernel)
    if points.shape[1] != X.shape[1]:
        raise DomainError(f"grid has dimension {points.shape[1]} but inputs have {X.shape[1]}")
    if bw.is_knn:
        D = pairwise_distances(X, points)
        if bw.k > X.shape[0]:
            raise DomainError(f"knn k={bw.k} exceeds the number of observations {X.shape[0]}")
        R = np.partition(D, bw.k - 1, axis=1)[:, bw.k - 1]
        W = _knn_weights(D, R, kernel)
        result = WeightMatrix(w=W, radii=R)
    else:
        h = bw.h_vector(X.shape[1])
        U = (X[None, :, :] - points[:, None, :]) / h
        W = np.prod(kernel_1d(U, kernel), axis=2)
        result = WeightMatrix(w=W)
    _check_rows(result.w, points)
    return result


def rule_of_thumb(X: np.ndarray, c: Optional[float] = None) -> np.ndarray:
    """h_k = c * sd(X_k) * n^(-1/(4+d))"""
    X = as_inputs(X)
    n, d = X.shape
    c = get_settings().rule_of_thumb_c if c is None else c
    sd = X.std(axis=0, ddof=1)
    for k in range(d):
        if not sd[k] > 0:
            raise ConstantColumnError(f"x{k + 1}")
    return c * sd * n ** (-1.0 / (4 + d))


def default_bandwidth_candidates(X: np.ndarray) -> list:
    """Log-spaced multipliers of the rule-of-thumb vector, shared across dimensions"""
    s = get_settings()
    base = rule_of_thumb(X)
    return [base * f for f in np.geomspace(s.cv_low, s.cv_high, s.cv_multipliers)]


def default_knn_candidates(X: np.ndarray) -> list:
    n, d = as_inputs(X).shape
    lo = min(2 * (d + 1), n - 1)
    hi = max(lo, (n - 1) // 2)
    return sorted({int(round(k)) for k in np.geomspace(lo, hi, 12)})


def _loo_score(X: np.ndarray, y: np.ndarray, W: np.ndarray) -> float:
    np.fill_diagonal(W, 0.0)
    if not (W.sum(axis=1) > 0).all():
        return np.inf
    system = normal_equations(X, y, X, W)
    if system.singular.any():
        return np.inf
    a = solve_normal_equations(system)[:, 0]
    return float(np.sum((y - a) ** 2))


def _fixed_loo_score(X, y, h, kernel) -> float:
    U = (X[None, :, :] - X[:, None, :]) / h
    return _loo_score(X, y, np.prod(kernel_1d(U, kernel), axis=2))


def _knn_loo_score(X, y, k, kernel) -> float:
    D = pairwise_distances(X, X)
    np.fill_diagonal(D, np.inf)
    R = np.partition(D, k - 1, axis=1)[:, k - 1]
    return _loo_score(X, y, _knn_weights(D, R, kernel))


def _validate_xy(X, y):
    X = as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DomainError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DomainError("X and y must be finite")
    if X.shape[0] < X.shape[1] + 2:
        raise DomainError(f"need at least d + 2 = {X.shape[1] + 2} observations, got {X.shape[0]}")
    return X, y


def _pick(scores: np.ndarray, y: np.ndarray) -> int:
    """First index within a rounding-level tie of the minimum"""
    best = float(np.min(scores))
    if not np.isfinite(best):
        raise DomainError("every candidate produced a singular leave-one-out system")
    tie = 1e-9 * best + 1e-12 * float(np.sum(y * y))
    return int(np.flatnonzero(scores <= best + tie)[0])


def bandwidth_cv_scores(X, y, candidates, kernel=None, threads: Optional[int] = None) -> np.ndarray:
    """Leave-one-out squared error of the local linear fit for each candidate h"""
    X, y = _validate_xy(X, y)
    kernel = as_kernel(kernel)
    hs = [BandwidthSpec.fixed(h).h_vector(X.shape[1]) for h in candidates]
    n_jobs = threads or get_settings().threads
    scores = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fixed_loo_score)(X, y, h, kernel) for h in hs
    )
    return np.asarray(scores, dtype=float)


def loocv_bandwidth(X, y, candidates=None, kernel=None, threads: Optional[int] = None) -> np.ndarray:
    """Candidate h minimizing the leave-one-out error; ties go to the smaller ||h||"""
    X, y = _validate_xy(X, y)
    if candidates is None:
        candidates = default_bandwidth_candidates(X)
    if len(candidates) == 0:
        raise DomainError("bandwidth candidate list is empty")
    hs = [BandwidthSpec.fixed(h).h_vector(X.shape[1]) for h in candidates]
    order = sorted(range(len(hs)), key=lambda i: (float(np.linalg.norm(hs[i])), i))
    hs = [hs[i] for i in order]
    scores = bandwidth_cv_scores(X, y, hs, kernel, threads)
    best = hs[_pick(scores, y)]
    logger.info(f"LOOCV bandwidth: h={best.tolist()} over {len(hs)} candidates")
    return best


def knn_cv_scores(X, y, candidate_ks, kernel=None, threads: Optional[int] = None) -> np.ndarray:
    X, y = _validate_xy(X, y)
    kernel = as_kernel(kernel)
    for k in candidate_ks:
        if not 1 <= int(k) <= X.shape[0] - 1:
            raise DomainError(f"knn candidate k={k} must lie in [1, n-1]")
    n_jobs = threads or get_settings().threads
    scores = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_knn_loo_score)(X, y, int(k), kernel) for k in candidate_ks
    )
    return np.asarray(scores, dtype=float)


def loocv_k(X, y, candidate_ks=None, kernel=None, threads: Optional[int] = None) -> int:
    """k minimizing the leave-one-out error with radii recomputed without each point"""
    X, y = _validate_xy(X, y)
    if candidate_ks is None:
        candidate_ks = default_knn_candidates(X)
    ks = sorted(int(k) for k in candidate_ks)
    if not ks:
        raise DomainError("knn candidate list is empty")
    scores = knn_cv_scores(X, y, ks, kernel, threads)
    best = ks[_pick(scores, y)]
    logger.info(f"LOOCV knn: k={best} over {len(ks)} candidates")
    return best
