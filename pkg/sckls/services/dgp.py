"""Data-generating processes for the simulation harness."""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional
import logging

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from sckls.errors import DomainError
from sckls.services import seeding

logger = logging.getLogger(__name__)

CES_BETA = 0.45
CES_SIGMA = 1.51
S_SCALE = 15.0
POLAR_ANGLE = (0.05, np.pi / 2 - 0.05)
POLAR_MODULUS = (0.0, 2.5)
S_SHAPE_1D = (0.05, 2.5)


class DgpKind(str, Enum):
    COBB_DOUGLAS = "cobb_douglas"
    S_SHAPE = "s_shape"
    POWER_TEST = "power_test"
    SIGMOID_TEST = "sigmoid_test"
    AFFINITY = "affinity"


class InputLaw(str, Enum):
    UNIFORM = "uniform"
    TRUNC_EXP = "trunc_exp"
    POLAR = "polar"


class NoiseKind(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


class DgpSpec(BaseModel):
    """One data-generating process; defaults reproduce the Cobb-Douglas estimation experiment"""

    kind: DgpKind = DgpKind.COBB_DOUGLAS
    d: int = 2
    n: int = 100
    seed: int = 0
    p: float = 1.0
    input_law: InputLaw = InputLaw.UNIFORM
    low: float = 1.0
    high: float = 10.0
    rate: float = 3.0
    noise: NoiseKind = NoiseKind.ADDITIVE
    sigma: float = 0.7
    contextual: int = 0
    gamma: float = 5.0

    @field_validator('d', 'n')
    @classmethod
    def validate_positive(cls, v, info):
        if v < 1:
            raise ValueError(f'{info.field_name} must be at least 1, got {v}')
        return v

    @field_validator('sigma')
    @classmethod
    def validate_sigma(cls, v):
        if not v > 0:
            raise ValueError(f'noise sd must be positive, got {v}')
        return v

    @model_validator(mode='after')
    def validate_combination(self):
        if not self.high > self.low:
            raise ValueError(f'input range [{self.low}, {self.high}] is empty')
        if self.input_law is InputLaw.POLAR and (self.kind is not DgpKind.S_SHAPE or self.d != 2):
            raise ValueError('the polar input law is only defined for the 2-input S-shape process')
        if self.kind is DgpKind.S_SHAPE and self.d not in (1, 2):
            raise ValueError('the S-shape process has one or two inputs')
        if self.kind in (DgpKind.POWER_TEST, DgpKind.SIGMOID_TEST) and self.d != 1:
            raise ValueError(f'{self.kind.value} is a single-input process')
        if self.input_law is InputLaw.TRUNC_EXP and not self.rate > 0:
            raise ValueError(f'truncated exponential rate must be positive, got {self.rate}')
        if self.contextual < 0:
            raise ValueError('contextual column count must be non-negative')
        return self

    @classmethod
    def cobb_douglas(cls, d: int, n: int, sigma: float = 0.7, **kw) -> "DgpSpec":
        return cls(kind=DgpKind.COBB_DOUGLAS, d=d, n=n, sigma=sigma, low=1.0, high=10.0, **kw)

    @classmethod
    def s_shape(cls, n: int, d: int = 2, sigma: float = 0.7, **kw) -> "DgpSpec":
        law = InputLaw.POLAR if d == 2 else InputLaw.UNIFORM
        low, high = S_SHAPE_1D
        return cls(kind=DgpKind.S_SHAPE, d=d, n=n, input_law=law, low=low, high=high, sigma=sigma, **kw)

    @classmethod
    def power_test(cls, p: float, n: int, sigma: float = 0.1, **kw) -> "DgpSpec":
        return cls(kind=DgpKind.POWER_TEST, d=1, n=n, p=p, low=0.0, high=1.0,
                   noise=NoiseKind.MULTIPLICATIVE, sigma=sigma, **kw)

    @classmethod
    def sigmoid_test(cls, n: int, sigma: float = 0.1, **kw) -> "DgpSpec":
        return cls(kind=DgpKind.SIGMOID_TEST, d=1, n=n, low=0.0, high=1.0,
                   noise=NoiseKind.MULTIPLICATIVE, sigma=sigma, **kw)

    @classmethod
    def affinity(cls, p: float, n: int, d: int = 1, sigma: float = 0.1, **kw) -> "DgpSpec":
        return cls(kind=DgpKind.AFFINITY, d=d, n=n, p=p, low=0.0, high=1.0, sigma=sigma, **kw)


@dataclass(frozen=True)
class DgpSample:
    X: np.ndarray
    y: np.ndarray
    g0: np.ndarray
    truth: Callable[[np.ndarray], np.ndarray]
    Z: Optional[np.ndarray] = None


def cobb_douglas(X: np.ndarray) -> np.ndarray:
    """prod_k x_k^(0.8 / d)"""
    X = np.atleast_2d(X)
    return np.prod(X ** (0.8 / X.shape[1]), axis=1)


def s_scale(w: np.ndarray) -> np.ndarray:
    """15 / (1 + exp(-5 log w)); 0 at w = 0"""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(w > 0, S_SCALE / (1.0 + np.power(np.where(w > 0, w, 1.0), -5.0)), 0.0)


def ces_core(X: np.ndarray) -> np.ndarray:
    rho = (CES_SIGMA - 1.0) / CES_SIGMA
    X = np.atleast_2d(X)
    inner = CES_BETA * np.power(X[:, 0], rho) + (1.0 - CES_BETA) * np.power(X[:, 1], rho)
    return np.power(inner, 1.0 / rho)


def s_shape(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return s_scale(X[:, 0] if X.shape[1] == 1 else ces_core(X))


def sigmoid(X: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(-5 log 2x))"""
    return s_scale(2.0 * np.atleast_2d(X)[:, 0]) / S_SCALE


def power(X: np.ndarray, p: float) -> np.ndarray:
    """x^p, with 0^0 = 1"""
    return np.power(np.atleast_2d(X)[:, 0], p)


def mean_power(X: np.ndarray, p: float) -> np.ndarray:
    """(1/d) sum_k x_k^p"""
    return np.mean(np.power(np.atleast_2d(X), p), axis=1)


def truth_function(spec: DgpSpec) -> Callable[[np.ndarray], np.ndarray]:
    if spec.kind is DgpKind.COBB_DOUGLAS:
        return cobb_douglas
    if spec.kind is DgpKind.S_SHAPE:
        return s_shape
    if spec.kind is DgpKind.POWER_TEST:
        return lambda X: power(X, spec.p)
    if spec.kind is DgpKind.SIGMOID_TEST:
        return sigmoid
    return lambda X: mean_power(X, spec.p)


def _inputs(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    n, d = spec.n, spec.d
    if spec.input_law is InputLaw.POLAR:
        eta = rng.uniform(*POLAR_ANGLE, size=n)
        omega = rng.uniform(*POLAR_MODULUS, size=n)
        return np.column_stack([omega * np.cos(eta), omega * np.sin(eta)])
    if spec.input_law is InputLaw.TRUNC_EXP:
        # inverse CDF of rate * exp(-rate x) restricted to [low, high]
        u = rng.random((n, d))
        a, b = np.exp(-spec.rate * spec.low), np.exp(-spec.rate * spec.high)
        return -np.log(a - u * (a - b)) / spec.rate
    return rng.uniform(spec.low, spec.high, size=(n, d))


def gen_dgp(spec: DgpSpec, replication: int = 0) -> DgpSample:
    """Draw (X, y, g0(X)) for one replication of ``spec``.

    Each role draws from its own counter stream keyed by
    (spec.seed, role, replication).
    """
    X = _inputs(spec, seeding.stream(spec.seed, seeding.DATA, replication))
    truth = truth_function(spec)
    g0 = truth(X)
    noise_rng = seeding.stream(spec.seed, seeding.NOISE, replication)
    eps = noise_rng.normal(0.0, 1.0, size=spec.n) * spec.sigma
    if spec.noise is NoiseKind.MULTIPLICATIVE:
        eps = (X[:, 0] + 1.0) * eps
    y = g0 + eps
    Z = None
    if spec.contextual:
        Z = seeding.stream(spec.seed, seeding.CONTEXT, replication).uniform(0.0, 1.0, size=(spec.n, spec.contextual))
        y = y + spec.gamma * Z.sum(axis=1)
    if not np.all(np.isfinite(y)):
        raise DomainError(f"{spec.kind.value} produced non-finite responses")
    return DgpSample(X=X, y=y, g0=g0, truth=truth, Z=Z)
