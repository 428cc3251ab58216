"""Tidy plot data of a fitted model and an optional static SVG."""

from pathlib import Path
from typing import Optional
import logging

import numpy as np
import pandas as pd

from sckls.errors import DomainError
from sckls.services.estimators import HyperplaneModel

logger = logging.getLogger(__name__)

LINE_POINTS = 200
SLICE_POINTS = 40


def plot_frame(model: HyperplaneModel, points: Optional[int] = None) -> pd.DataFrame:
    """Fitted values along the grid range (d = 1) or on an x1-x2 slice.

    Inputs beyond the second are held at the grid median.
    """
    P = model.grid.points
    lo, hi = P.min(axis=0), P.max(axis=0)
    if model.d == 1:
        count = points or LINE_POINTS
        Q = np.linspace(lo[0], hi[0], count).reshape(-1, 1)
    else:
        count = points or SLICE_POINTS
        if count < 2:
            raise DomainError(f"plot slice needs at least 2 points per axis, got {count}")
        u = np.linspace(lo[0], hi[0], count)
        v = np.linspace(lo[1], hi[1], count)
        U, V = np.meshgrid(u, v, indexing="ij")
        Q = np.tile(np.median(P, axis=0), (U.size, 1))
        Q[:, 0], Q[:, 1] = U.ravel(), V.ravel()
    frame = pd.DataFrame(Q, columns=[f"x{k + 1}" for k in range(model.d)])
    frame["fitted"] = model.predict(Q)
    return frame


def write_svg(path, frame: pd.DataFrame, X: Optional[np.ndarray] = None, y: Optional[np.ndarray] = None,
              title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed element ids so repeated runs give identical files
    matplotlib.rcParams["svg.hashsalt"] = "sckls"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(1, 1, figsize=(7, 5))
    if "x2" not in frame.columns:
        if X is not None and y is not None:
            ax.plot(X[:, 0], y, ".", color="0.6", label="observations")
        ax.plot(frame["x1"], frame["fitted"], "r-", label="fit")
        ax.set_xlabel("x1")
        ax.set_ylabel("y")
        ax.legend()
    else:
        count = int(round(np.sqrt(len(frame))))
        U = frame["x1"].to_numpy().reshape(count, count)
        V = frame["x2"].to_numpy().reshape(count, count)
        G = frame["fitted"].to_numpy().reshape(count, count)
        filled = ax.contourf(U, V, G, levels=15)
        fig.colorbar(filled, ax=ax, label="fitted")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    if title:
        ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Plot written to {path}")
    return path
