"""Batched weighted least squares for local linear fits.

For each evaluation point x_i the local design is ``[1, X_j - x_i]`` with
row weights ``W[i, j]``; the coefficient vector ``(a_i, b_i)`` solves the
weighted normal equations.
"""

from dataclasses import dataclass
from typing import Optional
import logging

import numpy as np

logger = logging.getLogger(__name__)

# Condition number (after diagonal equilibration) above which a local
# design counts as singular.
SINGULAR_COND = 1e12


@dataclass(frozen=True)
class LocalSystem:
    """Per-point normal equations M_i theta_i = r_i"""

    M: np.ndarray  # (m, d+1, d+1)
    r: np.ndarray  # (m, d+1)
    singular: np.ndarray  # (m,) bool


def local_design(X: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Stack ``[1, X_j - x_i]`` into an (m, n, d+1) array"""
    m, n = points.shape[0], X.shape[0]
    U = X[None, :, :] - points[:, None, :]
    return np.concatenate([np.ones((m, n, 1)), U], axis=2)


def normal_equations(
    X: np.ndarray,
    y: np.ndarray,
    points: np.ndarray,
    W: np.ndarray,
    ridge: float = 0.0,
) -> LocalSystem:
    Z = local_design(X, points)
    M = np.einsum('ij,ijk,ijl->ikl', W, Z, Z)
    r = np.einsum('ij,ijk,j->ik', W, Z, y)
    if ridge > 0:
        d = X.shape[1]
        mass = W.sum(axis=1)
        idx = np.arange(1, d + 1)
        M[:, idx, idx] += ridge * mass[:, None]
    return LocalSystem(M=M, r=r, singular=_singular_mask(M))


def _singular_mask(M: np.ndarray) -> np.ndarray:
    diag = np.einsum('ikk->ik', M)
    bad = ~(diag > 0).all(axis=1)
    scale = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 0.0)
    E = M * scale[:, :, None] * scale[:, None, :]
    sv = np.linalg.svd(E[~bad], compute_uv=False)
    cond_bad = np.zeros(M.shape[0], dtype=bool)
    if sv.size:
        with np.errstate(divide='ignore'):
            cond = sv[:, 0] / sv[:, -1]
        cond_bad[~bad] = ~(cond < SINGULAR_COND)
    return bad | cond_bad


def solve_normal_equations(system: LocalSystem, fill: Optional[float] = None) -> np.ndarray:
    """Solve every non-singular system; singular rows get ``fill`` (NaN by default)"""
    m, p = system.r.shape
    theta = np.full((m, p), np.nan if fill is None else fill)
    ok = ~system.singular
    if ok.any():
        theta[ok] = np.linalg.solve(system.M[ok], system.r[ok][:, :, None])[:, :, 0]
    return theta


def weighted_objective(
    X: np.ndarray,
    y: np.ndarray,
    points: np.ndarray,
    W: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
) -> np.ndarray:
    """Per-point contributions sum_j W_ij (y_j - a_i - (X_j - x_i)'b_i)^2"""
    U = X[None, :, :] - points[:, None, :]
    fitted = a[:, None] + np.einsum('ijk,ik->ij', U, b)
    return np.einsum('ij,ij->i', W, (y[None, :] - fitted) ** 2)


def as_inputs(X) -> np.ndarray:
    """Coerce inputs to an (n, d) float array; a 1-D array is one column"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"inputs must be 1-D or 2-D, got shape {X.shape}")
    return X


def as_points(grid, d: int) -> np.ndarray:
    """Evaluation points from an EvalGrid or array; a 1-D array holds m points when d == 1"""
    P = np.asarray(getattr(grid, "points", grid), dtype=float)
    if P.ndim == 1:
        P = P.reshape(-1, d)
    return P
