from typing import Any, Dict, List, Optional

from pydantic import BaseModel

MODEL_FORMAT = "sckls-model"
MODEL_VERSION = 1


class GridDocument(BaseModel):
    """Evaluation points with their lattice bookkeeping"""

    points: List[List[float]]
    provenance: str
    lattice_shape: Optional[List[int]] = None
    lattice_index: Optional[List[List[int]]] = None
    kept_index: Optional[List[int]] = None
    hull_filtered: bool = False


class Provenance(BaseModel):
    """Where an artifact came from"""

    tool_version: str
    input_sha256: Optional[str] = None
    seed: Optional[int] = None
    command: Optional[str] = None
    generator: Optional[str] = None


class ModelDocument(BaseModel):
    """Versioned JSON form of a fitted hyperplane model"""

    format: str = MODEL_FORMAT
    version: int = MODEL_VERSION
    shape: Dict[str, Any]
    bandwidth: Optional[Dict[str, Any]] = None
    kernel: Optional[str] = None
    grid: GridDocument
    a: List[float]
    b: List[List[float]]
    diagnostics: Dict[str, Any] = {}
    contextual: Optional[Dict[str, Any]] = None
    provenance: Provenance

    class Config:
        json_schema_extra = {
            "example": {
                "format": MODEL_FORMAT,
                "version": MODEL_VERSION,
                "shape": {"curvature": "concave", "monotonicity": ["increasing"], "bounds": []},
                "bandwidth": {"mode": "fixed", "h": [0.42]},
                "kernel": "gaussian",
                "grid": {"points": [[1.0], [2.0]], "provenance": "uniform"},
                "a": [1.0, 1.6],
                "b": [[0.8], [0.4]],
                "provenance": {"tool_version": "0.1.0", "input_sha256": "ab12...", "seed": 7},
            }
        }


class FitReport(BaseModel):
    """Human-auditable summary written next to a fitted model"""

    n: int
    d: int
    grid_size: int
    shape: str
    bandwidth: Dict[str, Any]
    kernel: str
    r_squared: float
    r_squared_adjusted: Optional[float] = None
    marginal: Dict[str, Any]
    mpss: Optional[List[Dict[str, Any]]] = None
    contextual: Optional[Dict[str, Any]] = None
    diagnostics: Dict[str, Any] = {}
    provenance: Provenance


class TestReport(BaseModel):
    """Result of a shape or affinity test with the full bootstrap vector"""

    statistic: float
    p_value: float
    alpha: float
    reject: bool
    delta_n: float
    seed: int
    scheme: str
    B: int
    failed_replicates: List[int]
    finite_replicates: int
    p_value_denominator: str = "finite_replicates"
    bootstrap_stats: List[float]
    details: Dict[str, Any] = {}
    provenance: Provenance

    __test__ = False


class BandwidthReport(BaseModel):
    """Leave-one-out selection result and the full score curve"""

    mode: str
    selected: List[float]
    candidates: List[List[float]]
    scores: List[float]
    kernel: str
    provenance: Provenance


class RunMetadata(BaseModel):
    """JSON header written alongside simulation CSV tables"""

    experiment: str
    config: Dict[str, Any]
    provenance: Provenance
    tables: List[str]
