from typing import List, Optional, Tuple
import re

from pydantic import BaseModel, field_validator

_GRID_KINDS = ("uniform", "percentile")


class FitOptions(BaseModel):
    """Options of the fit command"""

    shape: str = "concave-increasing"
    grid: str = "uniform"
    grid_counts: Optional[List[int]] = None
    grid_target: int = 400
    hull_filter: bool = False
    bandwidth: str = "auto"
    kernel: Optional[str] = None
    cv_grid: Optional[List[float]] = None
    contextual: List[str] = []
    seed: int = 0
    lazy: bool = True

    @field_validator('shape')
    @classmethod
    def validate_shape(cls, v):
        """concave|convex|none joined with increasing|decreasing by '-'"""
        v = v.strip().lower()
        parts = v.split('-')
        curv = {'concave', 'convex', 'none'}
        mono = {'increasing', 'decreasing'}
        if not parts or any(p not in curv | mono for p in parts) or sum(p in curv for p in parts) > 1 \
                or sum(p in mono for p in parts) > 1:
            raise ValueError(f"unrecognized shape '{v}'")
        return v

    @field_validator('grid')
    @classmethod
    def validate_grid(cls, v):
        """A lattice kind or an external points file given as 'file:<path>'"""
        if v in _GRID_KINDS or v.startswith('file:'):
            return v
        raise ValueError(f"grid must be one of {_GRID_KINDS} or file:<path>, got '{v}'")

    @field_validator('bandwidth')
    @classmethod
    def validate_bandwidth(cls, v):
        """auto | fixed:h1[,h2...] | knn:auto | knn:K"""
        v = v.strip().lower()
        if v in ('auto', 'knn:auto') or re.fullmatch(r'knn:[1-9][0-9]*', v):
            return v
        if v.startswith('fixed:'):
            try:
                values = [float(t) for t in v[len('fixed:'):].split(',')]
            except ValueError:
                raise ValueError(f"fixed bandwidth must be a comma-separated list of numbers, got '{v}'")
            if not values or any(not h > 0 for h in values):
                raise ValueError('fixed bandwidths must be positive')
            return v
        raise ValueError(f"bandwidth must be auto, fixed:h1,..., knn:auto or knn:K, got '{v}'")

    @field_validator('seed')
    @classmethod
    def validate_seed(cls, v):
        if v < 0:
            raise ValueError('seed must be non-negative')
        return v

    def bandwidth_mode(self) -> Tuple[str, Optional[List[float]]]:
        """('auto'|'fixed'|'knn', values)"""
        if self.bandwidth == 'auto':
            return 'auto', None
        if self.bandwidth == 'knn:auto':
            return 'knn', None
        if self.bandwidth.startswith('knn:'):
            return 'knn', [float(self.bandwidth[4:])]
        return 'fixed', [float(t) for t in self.bandwidth[len('fixed:'):].split(',')]

    class Config:
        json_schema_extra = {
            "example": {
                "shape": "concave-increasing",
                "grid": "uniform",
                "bandwidth": "auto",
                "contextual": ["z1"],
                "seed": 7,
            }
        }


class TestOptions(BaseModel):
    """Options shared by the shape and affinity tests"""

    B: int = 200
    scheme: str = "rademacher"
    alpha: float = 0.05
    seed: int = 0
    use_delta: bool = False
    recentre: bool = False
    monotone_variant: bool = False
    homoscedastic: bool = False

    __test__ = False

    @field_validator('alpha')
    @classmethod
    def validate_alpha(cls, v):
        if not 0 < v < 1:
            raise ValueError('alpha must lie in (0, 1)')
        return v

    @field_validator('scheme')
    @classmethod
    def validate_scheme(cls, v):
        v = v.strip().lower()
        if v not in ('rademacher', 'mammen'):
            raise ValueError("bootstrap scheme must be 'rademacher' or 'mammen'")
        return v
