"""Evaluation-point sets: uniform and percentile lattices, hull filtering, adjacency."""

from dataclasses import dataclass, replace
from enum import Enum
from itertools import product
from typing import Optional, Sequence, Union
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import brentq, linprog
from scipy.spatial import cKDTree
from scipy.special import ndtr

from sckls.config import get_settings
from sckls.errors import ConstantColumnError, DegenerateHullError, DomainError, UnsupportedStructureError
from sckls.services.local_linear import as_inputs

logger = logging.getLogger(__name__)


class Provenance(str, Enum):
    UNIFORM = "uniform"
    PERCENTILE = "percentile"
    EXTERNAL = "external"


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation points with optional lattice bookkeeping.

    ``lattice_index`` holds each surviving point's integer lattice
    coordinates; ``kept_index`` its position in the unfiltered lattice.
    """

    points: np.ndarray
    provenance: Provenance = Provenance.EXTERNAL
    lattice_shape: Optional[tuple] = None
    lattice_index: Optional[np.ndarray] = None
    kept_index: Optional[np.ndarray] = None
    hull_filtered: bool = False

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def is_lattice(self) -> bool:
        return self.lattice_shape is not None

    @classmethod
    def external(cls, points) -> "EvalGrid":
        P = as_inputs(points)
        if np.unique(P, axis=0).shape[0] != P.shape[0]:
            raise DomainError("evaluation points must be pairwise distinct")
        return cls(points=P, provenance=Provenance.EXTERNAL)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.points, columns=[f"x{k + 1}" for k in range(self.d)])
        if self.lattice_index is not None:
            for k in range(self.d):
                frame[f"cell{k + 1}"] = self.lattice_index[:, k]
        frame["provenance"] = self.provenance.value
        return frame


@dataclass(frozen=True)
class AdjacencyPairs:
    """Ordered adjacent index pairs (i, l); closed under swapping"""

    pairs: np.ndarray  # (K, 2) int

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def unordered(self) -> int:
        return len(self) // 2


def _counts(per_dim_counts: Union[int, Sequence[int]], d: int) -> tuple:
    counts = tuple(int(c) for c in np.atleast_1d(per_dim_counts))
    if len(counts) == 1:
        counts = counts * d
    if len(counts) != d:
        raise DomainError(f"got {len(counts)} grid counts for {d} input dimensions")
    if min(counts) < 2:
        raise DomainError(f"grid counts must be at least 2 per dimension, got {counts}")
    return counts


def _ranges(X: np.ndarray):
    lo, hi = X.min(axis=0), X.max(axis=0)
    for k in np.flatnonzero(~(hi > lo)):
        raise ConstantColumnError(f"x{k + 1}")
    return lo, hi


def _lattice(axes: list, provenance: Provenance) -> EvalGrid:
    shape = tuple(len(a) for a in axes)
    index = np.array(list(product(*[range(c) for c in shape])), dtype=int)
    points = np.column_stack([axes[k][index[:, k]] for k in range(len(axes))])
    return EvalGrid(
        points=points,
        provenance=provenance,
        lattice_shape=shape,
        lattice_index=index,
        kept_index=np.arange(points.shape[0]),
    )


def uniform_grid(X, per_dim_counts) -> EvalGrid:
    """Equally spaced points from min to max of each input, Cartesian product"""
    X = as_inputs(X)
    counts = _counts(per_dim_counts, X.shape[1])
    lo, hi = _ranges(X)
    axes = [np.linspace(lo[k], hi[k], counts[k]) for k in range(X.shape[1])]
    return _lattice(axes, Provenance.UNIFORM)


def _kde_quantiles(x: np.ndarray, count: int, c: float) -> np.ndarray:
    n = x.size
    sd = x.std(ddof=1)
    bw = c * sd * n ** (-0.2)
    lo, hi = x.min(), x.max()

    def cdf(t: float) -> float:
        return float(np.mean(ndtr((t - x) / bw)))

    f_lo, f_hi = cdf(lo), cdf(hi)
    axis = np.empty(count)
    axis[0], axis[-1] = lo, hi
    for j in range(1, count - 1):
        level = f_lo + (f_hi - f_lo) * j / (count - 1)
        axis[j] = brentq(lambda t: cdf(t) - level, lo, hi, xtol=1e-12 * (hi - lo))
    return axis


def percentile_grid(X, per_dim_counts, kde_c: Optional[float] = None) -> EvalGrid:
    """Equally spaced quantiles of each input's Gaussian-KDE distribution on [min, max]"""
    X = as_inputs(X)
    counts = _counts(per_dim_counts, X.shape[1])
    _ranges(X)
    c = get_settings().kde_c if kde_c is None else kde_c
    axes = [_kde_quantiles(X[:, k], counts[k], c) for k in range(X.shape[1])]
    return _lattice(axes, Provenance.PERCENTILE)


def _standardize(X: np.ndarray, P: np.ndarray):
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (X - lo) / span, (P - lo) / span


def hull_residual(Xs: np.ndarray, p: np.ndarray) -> float:
    """L1 distance from ``p`` to the nearest convex combination of the rows of ``Xs``"""
    n, d = Xs.shape
    # variables: lambda (n), s_plus (d), s_minus (d)
    cost = np.concatenate([np.zeros(n), np.ones(2 * d)])
    A_eq = np.zeros((d + 1, n + 2 * d))
    A_eq[:d, :n] = Xs.T
    A_eq[:d, n:n + d] = np.eye(d)
    A_eq[:d, n + d:] = -np.eye(d)
    A_eq[d, :n] = 1.0
    b_eq = np.concatenate([p, [1.0]])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise DegenerateHullError(f"hull membership LP failed: {res.message}")
    return float(res.fun)


def in_hull(X, points, tol: Optional[float] = None, threads: Optional[int] = None,
            require_interior: bool = True) -> np.ndarray:
    """Boolean mask: which points are inside or on the convex hull of X

    With ``require_interior=False`` an affinely dependent X is accepted and
    membership is tested against its lower-dimensional hull.
    """
    X = as_inputs(X)
    P = as_inputs(points)
    n, d = X.shape
    tol = get_settings().hull_tol if tol is None else tol
    if require_interior and (n < d + 1 or np.linalg.matrix_rank(X - X.mean(axis=0)) < d):
        raise DegenerateHullError("observations are affinely dependent; their convex hull has empty interior")
    Xs, Ps = _standardize(X, P)
    inside_box = ((Ps >= -tol) & (Ps <= 1 + tol)).all(axis=1)
    mask = np.zeros(P.shape[0], dtype=bool)
    candidates = np.flatnonzero(inside_box)
    n_jobs = threads or get_settings().threads
    residuals = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(hull_residual)(Xs, Ps[i]) for i in candidates
    )
    mask[candidates] = np.asarray(residuals, dtype=float) <= tol
    return mask


def convex_hull_filter(grid: EvalGrid, X, tol: Optional[float] = None) -> EvalGrid:
    """Keep the grid points inside or on the hull of the observations, order preserved"""
    keep = in_hull(X, grid.points, tol)
    logger.info(f"Hull filter kept {int(keep.sum())} of {grid.m} evaluation points")
    return replace(
        grid,
        points=grid.points[keep],
        lattice_index=None if grid.lattice_index is None else grid.lattice_index[keep],
        kept_index=(np.arange(grid.m) if grid.kept_index is None else grid.kept_index)[keep],
        hull_filtered=True,
    )


def adjacency_pairs(grid: EvalGrid) -> AdjacencyPairs:
    """Moore-neighbourhood pairs among the surviving lattice points"""
    if not grid.is_lattice or grid.lattice_index is None:
        raise UnsupportedStructureError("adjacency is only defined for lattice grids")
    where = {tuple(cell): i for i, cell in enumerate(grid.lattice_index.tolist())}
    offsets = [o for o in product((-1, 0, 1), repeat=grid.d) if any(o)]
    pairs = []
    for i, cell in enumerate(grid.lattice_index.tolist()):
        for o in offsets:
            l = where.get(tuple(c + s for c, s in zip(cell, o)))
            if l is not None:
                pairs.append((i, l))
    pairs = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
    return AdjacencyPairs(pairs=pairs)


def neighbor_pairs(points, k: Optional[int] = None) -> AdjacencyPairs:
    """Ordered pairs of each point with its k nearest others (k defaults to 2d), symmetrized"""
    P = as_inputs(points)
    m, d = P.shape
    k = min(2 * d if k is None else k, m - 1)
    if k < 1:
        return AdjacencyPairs(pairs=np.zeros((0, 2), dtype=int))
    _, idx = cKDTree(P).query(P, k=k + 1)
    pairs = set()
    for i in range(m):
        for l in np.atleast_1d(idx[i]):
            if l != i and l < m:
                pairs.add((i, int(l)))
                pairs.add((int(l), i))
    return AdjacencyPairs(pairs=np.array(sorted(pairs), dtype=int).reshape(-1, 2))


def counts_for_target(m_target: int, d: int, slack: float = 1.1) -> int:
    """Largest per-dimension count c with c^d <= slack * m_target"""
    c = 2
    while (c + 1) ** d <= slack * m_target:
        c += 1
    return c
