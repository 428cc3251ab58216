"""Economic summaries of a fitted hyperplane model: marginal products, MRS and MPSS."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from sckls.errors import DomainError
from sckls.services.estimators import Curvature, HyperplaneModel

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILES = (10, 25, 50, 75, 90)
RATIO_FLOOR = 1e-12
ACTIVE_RULE = "argmin of the min-of-planes (argmax for convex, nearest grid point otherwise); ties to lowest index"


@dataclass(frozen=True)
class MarginalStats:
    table: pd.DataFrame  # rows: b1.., b2/b1..; columns: p10..
    active: np.ndarray
    rule: str = ACTIVE_RULE

    def to_document(self) -> dict:
        return {
            "percentiles": [float(c[1:]) for c in self.table.columns],
            "rows": {
                name: [float(v) for v in row]
                for name, row in zip(self.table.index, self.table.to_numpy())
            },
            "active_rule": self.rule,
        }


@dataclass(frozen=True)
class MpssResult:
    t: float
    point: np.ndarray
    output: float
    average_product: float
    candidates: int

    def to_document(self) -> dict:
        return {
            "t": float(self.t),
            "point": [float(v) for v in self.point],
            "output": float(self.output),
            "average_product": float(self.average_product),
        }


def _ratio_pairs(d: int, ratios: Optional[Sequence[Tuple[int, int]]]) -> List[Tuple[int, int]]:
    if ratios is None:
        return [(k, l) for k in range(d) for l in range(d) if k != l]
    pairs = [(int(k), int(l)) for k, l in ratios]
    for k, l in pairs:
        if not (0 <= k < d and 0 <= l < d) or k == l:
            raise DomainError(f"ratio ({k}, {l}) is not a pair of distinct input indices for d={d}")
    return pairs


def marginal_stats(
    model: HyperplaneModel,
    points=None,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    ratios: Optional[Sequence[Tuple[int, int]]] = None,
) -> MarginalStats:
    """Percentiles of the active-plane gradients and their pairwise ratios.

    A ratio b_k / b_l whose denominator is below 1e-12 is reported as +inf.
    """
    P = model.grid.points if points is None else model.queries(points)
    idx = model.active_planes(P)
    grads = model.b[idx]
    d = model.d
    rows = {f"b{k + 1}": grads[:, k] for k in range(d)}
    for k, l in _ratio_pairs(d, ratios):
        num, den = grads[:, k], grads[:, l]
        with np.errstate(divide="ignore", invalid="ignore"):
            rows[f"b{k + 1}/b{l + 1}"] = np.where(np.abs(den) < RATIO_FLOOR, np.inf, num / den)
    q = np.asarray(percentiles, dtype=float)
    if q.size == 0 or np.any((q < 0) | (q > 100)):
        raise DomainError(f"percentiles must lie in [0, 100], got {q.tolist()}")
    table = pd.DataFrame(
        {name: np.percentile(values, q, method="inverted_cdf") for name, values in rows.items()},
        index=[f"p{v:g}" for v in q],
    ).T
    return MarginalStats(table=table, active=idx)


def _envelope_breakpoints(alpha: np.ndarray, beta: np.ndarray, t_lo: float, t_hi: float) -> List[float]:
    """Kinks of t -> min_i(alpha_i + beta_i t) inside (t_lo, t_hi)"""
    scale = max(1.0, float(np.abs(alpha).max()), float(np.abs(beta).max()) * max(abs(t_lo), abs(t_hi)))
    eps = 1e-12 * scale

    def lowest(t: float, among: np.ndarray) -> int:
        v = alpha[among] + beta[among] * t
        tied = among[v <= v.min() + eps]
        return int(tied[np.lexsort((tied, beta[tied]))[0]])

    t = t_lo
    cur = lowest(t, np.arange(alpha.size))
    kinks = []
    while True:
        descending = np.flatnonzero(beta < beta[cur])
        if descending.size == 0:
            break
        cross = (alpha[descending] - alpha[cur]) / (beta[cur] - beta[descending])
        ahead = cross >= t - eps
        if not ahead.any():
            break
        t_next = float(cross[ahead].min())
        if t_next >= t_hi:
            break
        at = descending[ahead][cross[ahead] <= t_next + eps]
        if t_next > t_lo:
            kinks.append(t_next)
        t, cur = t_next, lowest(t_next, at)
    return kinks


def _default_range(model: HyperplaneModel, direction: np.ndarray) -> Tuple[float, float]:
    lo, hi = model.grid.points.min(axis=0), model.grid.points.max(axis=0)
    t_lo, t_hi = float(np.max(lo / direction)), float(np.min(hi / direction))
    if t_lo <= 0 < t_hi:
        t_lo = 1e-6 * t_hi
        logger.info(f"MPSS ray starts at the origin; lower end moved to {t_lo:.3g}")
    return t_lo, t_hi


def mpss(model: HyperplaneModel, direction, t_range: Optional[Tuple[float, float]] = None) -> MpssResult:
    """Scale t maximizing predict(t * direction) / t; ties go to the largest t"""
    if model.shape.curvature is Curvature.NONE:
        raise DomainError("MPSS requires a concave or convex model")
    direction = np.asarray(direction, dtype=float).ravel()
    if direction.size != model.d:
        raise DomainError(f"direction has {direction.size} entries for a {model.d}-input model")
    if not np.all(direction > 0):
        raise DomainError(f"direction must be strictly positive, got {direction.tolist()}")
    t_lo, t_hi = _default_range(model, direction) if t_range is None else map(float, t_range)
    if not (0 < t_lo <= t_hi and np.isfinite(t_hi)):
        raise DomainError(f"admissible scale range ({t_lo}, {t_hi}) is empty")

    sign = 1.0 if model.shape.curvature is Curvature.CONCAVE else -1.0
    alpha = sign * (model.a - np.einsum('ik,ik->i', model.grid.points, model.b))
    beta = sign * (model.b @ direction)
    ts = np.array(sorted({t_lo, t_hi, *_envelope_breakpoints(alpha, beta, t_lo, t_hi)}))
    outputs = np.asarray(model.predict(ts[:, None] * direction[None, :]), dtype=float)
    ap = outputs / ts
    best = float(ap.max())
    tied = np.flatnonzero(ap >= best - 1e-12 * max(1.0, abs(best)))
    j = int(tied[-1])
    return MpssResult(
        t=float(ts[j]),
        point=ts[j] * direction,
        output=float(outputs[j]),
        average_product=float(ap[j]),
        candidates=int(ts.size),
    )
