"""Partially linear model y = Z'gamma + g(X) + e.

Stage one residualizes Z and y on X with local linear conditional means and
regresses the residuals; stage two fits SCKLS on y - Z'gamma_hat.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.stats import norm

from sckls.errors import DomainError, IdentificationError
from sckls.services.estimators import CONCAVE_INCREASING, HyperplaneModel, ShapeSpec, check_xy, sckls_fit
from sckls.services.kernel_weights import BandwidthSpec, as_kernel, loocv_bandwidth, weight_matrix
from sckls.services.local_linear import as_inputs, normal_equations, solve_normal_equations

logger = logging.getLogger(__name__)

Z_CRIT = 1.96
RESIDUAL_RANK_RATIO = 1e-6
RIDGE_FALLBACK = 1e-8


@dataclass
class ContextualFit:
    gamma: np.ndarray
    cov: np.ndarray
    adjusted_y: np.ndarray
    names: List[str] = field(default_factory=list)
    bandwidths: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def p_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return 2.0 * norm.sf(np.abs(self.gamma / self.se))

    @property
    def lower(self) -> np.ndarray:
        return self.gamma - Z_CRIT * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.gamma + Z_CRIT * self.se

    def to_document(self) -> dict:
        return {
            "coefficients": [
                {
                    "name": name,
                    "gamma": float(g),
                    "se": float(s),
                    "p_value": float(p),
                    "lower": float(lo),
                    "upper": float(hi),
                }
                for name, g, s, p, lo, hi in zip(
                    self.names, self.gamma, self.se, self.p_values, self.lower, self.upper
                )
            ],
            "covariance": "heteroskedasticity-robust sandwich, normal quantiles",
            "conditional_mean_bandwidths": self.bandwidths,
        }


def _conditional_mean(X: np.ndarray, v: np.ndarray, bw: BandwidthSpec, kernel) -> np.ndarray:
    W = weight_matrix(X, X, bw, kernel).w
    system = normal_equations(X, v, X, W)
    if system.singular.any():
        logger.warning(
            f"{int(system.singular.sum())} singular local designs in residualization; "
            f"retrying with ridge {RIDGE_FALLBACK:g}"
        )
        system = normal_equations(X, v, X, W, ridge=RIDGE_FALLBACK)
    return solve_normal_equations(system, fill=np.nan)[:, 0]


def residualize_columns(V, X, bw: Optional[BandwidthSpec] = None, kernel=None,
                        names: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, Dict[str, dict]]:
    """V - E[V | X] column by column, with the bandwidth used per column.

    Without ``bw`` each column gets its own leave-one-out bandwidth.
    """
    X = as_inputs(X)
    V = np.asarray(V, dtype=float)
    V = V.reshape(-1, 1) if V.ndim == 1 else V
    if V.shape[0] != X.shape[0]:
        raise DomainError(f"V has {V.shape[0]} rows but X has {X.shape[0]}")
    kernel = as_kernel(kernel)
    names = list(names) if names is not None else [f"v{c + 1}" for c in range(V.shape[1])]
    out = np.empty_like(V)
    used = {}
    for c in range(V.shape[1]):
        col_bw = bw or BandwidthSpec.fixed(loocv_bandwidth(X, V[:, c], kernel=kernel))
        out[:, c] = V[:, c] - _conditional_mean(X, V[:, c], col_bw, kernel)
        used[names[c]] = col_bw.describe()
    if not np.all(np.isfinite(out)):
        raise DomainError("residualization produced non-finite values")
    return out, used


def residualize(V, X, bw: Optional[BandwidthSpec] = None, kernel=None) -> np.ndarray:
    """V - E[V | X]; an n x p matrix even for a single column"""
    return residualize_columns(V, X, bw, kernel)[0]


def _check_identified(Z: np.ndarray, Zt: np.ndarray, names: Sequence[str]) -> None:
    spread = np.linalg.norm(Z - Z.mean(axis=0), axis=0)
    left = np.linalg.norm(Zt, axis=0)
    for c, name in enumerate(names):
        if not left[c] > RESIDUAL_RANK_RATIO * max(spread[c], 1e-300):
            raise IdentificationError(
                f"contextual variable '{name}' is (nearly) a function of the inputs; gamma is not identified"
            )
    scale = np.where(left > 0, 1.0 / np.where(left > 0, left, 1.0), 0.0)
    if np.linalg.matrix_rank(Zt * scale) < Zt.shape[1]:
        raise IdentificationError(
            f"residualized contextual variables {list(names)} are linearly dependent; gamma is not identified"
        )


def estimate_gamma(Z, y, X, bw: Optional[BandwidthSpec] = None, kernel=None,
                   names: Optional[Sequence[str]] = None) -> ContextualFit:
    """Robinson-style gamma with a sandwich covariance"""
    X, y = check_xy(X, y)
    n = y.size
    Z = np.zeros((n, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
    l = Z.shape[1]
    names = list(names) if names is not None else [f"z{c + 1}" for c in range(l)]
    if l == 0:
        return ContextualFit(gamma=np.zeros(0), cov=np.zeros((0, 0)), adjusted_y=y.copy(), names=[])
    if not np.all(np.isfinite(Z)):
        raise DomainError("contextual variables must be finite")
    Zt, used = residualize_columns(Z, X, bw, kernel, names)
    yt, used_y = residualize_columns(y, X, bw, kernel, ["y"])
    yt = yt[:, 0]
    used.update(used_y)
    _check_identified(Z, Zt, names)
    A = Zt.T @ Zt
    gamma = np.linalg.solve(A, Zt.T @ yt)
    e = yt - Zt @ gamma
    A_inv = np.linalg.inv(A)
    meat = (Zt * (e * e)[:, None]).T @ Zt
    cov = A_inv @ meat @ A_inv
    adjusted = y - Z @ gamma
    logger.info(f"Contextual coefficients: {dict(zip(names, np.round(gamma, 6).tolist()))}")
    return ContextualFit(gamma=gamma, cov=cov, adjusted_y=adjusted, names=names, bandwidths=used)


def fit_partially_linear(
    X,
    y,
    Z,
    grid,
    bw: BandwidthSpec,
    kernel=None,
    shape: ShapeSpec = CONCAVE_INCREASING,
    names: Optional[Sequence[str]] = None,
    lazy: bool = True,
) -> Tuple[ContextualFit, HyperplaneModel]:
    """gamma first, then SCKLS on the adjusted response"""
    contextual = estimate_gamma(Z, y, X, kernel=kernel, names=names)
    model = sckls_fit(X, contextual.adjusted_y, grid, bw, kernel, shape, lazy=lazy)
    return contextual, model
