from typing import Optional, Tuple

import numpy as np
import pandas as pd


def generate_cobb_douglas(n: int = 60, d: int = 2, sigma: float = 0.1, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    r: np.random.Generator = np.random.default_rng(seed)
    X: np.ndarray = r.uniform(1.0, 10.0, size=(n, d))
    y: np.ndarray = np.prod(X ** (0.8 / d), axis=1) + r.normal(0.0, sigma, size=n)
    return X, y


def generate_affine(n: int = 30, d: int = 1, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Noiseless y = 1 + 2 x1 + 0.5 x2 + ..."""
    r: np.random.Generator = np.random.default_rng(seed)
    X: np.ndarray = r.uniform(0.0, 4.0, size=(n, d))
    slopes: np.ndarray = np.array([2.0] + [0.5] * (d - 1))
    return X, 1.0 + X @ slopes


def write_data_csv(path, X: np.ndarray, y: np.ndarray, Z: Optional[np.ndarray] = None) -> str:
    frame: pd.DataFrame = pd.DataFrame(X, columns=[f"x{k + 1}" for k in range(X.shape[1])])
    frame["y"] = y
    if Z is not None:
        for k in range(Z.shape[1]):
            frame[f"z{k + 1}"] = Z[:, k]
    frame.to_csv(path, index=False, float_format="%.17g")
    return str(path)
