"""CSV ingestion, model documents and report writers.

Floats are written in their shortest round-trip form, so a model saved and
reloaded predicts bit-identically.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import hashlib
import json
import logging
import re

import numpy as np
import pandas as pd

from sckls import __version__
from sckls.errors import ConstantColumnError, MalformedDataError
from sckls.models.response import (
    MODEL_FORMAT,
    MODEL_VERSION,
    GridDocument,
    ModelDocument,
    Provenance,
    RunMetadata,
)
from sckls.services.estimators import (
    Curvature,
    DerivativeBound,
    HyperplaneModel,
    Monotonicity,
    ShapeSpec,
)
from sckls.services.evaluation_grid import EvalGrid, Provenance as GridProvenance
from sckls.services.kernel_weights import BandwidthSpec, Kernel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# plain decimal or scientific notation with '.' as the decimal mark
_NUMBER = re.compile(r'^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$')
_X_COLUMN = re.compile(r'^x(\d+)$')


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    Z: Optional[np.ndarray]
    x_names: List[str]
    z_names: List[str] = field(default_factory=list)
    sha256: str = ""

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(input_path: Optional[PathLike] = None, seed: Optional[int] = None,
               command: Optional[str] = None, generator: Optional[str] = None) -> Provenance:
    return Provenance(
        tool_version=__version__,
        input_sha256=file_digest(input_path) if input_path else None,
        seed=seed,
        command=command,
        generator=generator,
    )


def _read_frame(path: PathLike) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise MalformedDataError(f"data file '{path}' does not exist")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise MalformedDataError(f"cannot parse '{path}' as UTF-8 comma-separated values: {exc}")
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    if column not in frame.columns:
        raise MalformedDataError(f"missing column '{column}'; found {list(frame.columns)}")
    raw = frame[column].astype(str).str.strip()
    bad = ~raw.str.match(_NUMBER)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedDataError(
            f"column '{column}' row {row + 2}: '{raw.iloc[row]}' is not a number "
            f"(use '.' as the decimal mark, no thousands separators, no missing cells)"
        )
    return raw.astype(float).to_numpy()


def input_columns(frame: pd.DataFrame) -> List[str]:
    """x1..xd ordered by index"""
    found = sorted((int(m.group(1)), c) for c in frame.columns if (m := _X_COLUMN.match(c)))
    return [c for _, c in found]


def load_dataset(path: PathLike, y_column: str = "y", z_columns: Sequence[str] = (),
                 x_columns: Optional[Sequence[str]] = None) -> Dataset:
    """Read x1..xd, y and optional contextual columns from a CSV file"""
    frame = _read_frame(path)
    x_names = list(x_columns) if x_columns else input_columns(frame)
    if not x_names:
        raise MalformedDataError(f"'{path}' has no input columns x1..xd")
    X = np.column_stack([_numeric(frame, c) for c in x_names]) if len(frame) else np.zeros((0, len(x_names)))
    y = _numeric(frame, y_column) if len(frame) else np.zeros(0)
    z_names = list(z_columns)
    Z = np.column_stack([_numeric(frame, c) for c in z_names]) if z_names and len(frame) else None
    n, d = X.shape
    if n < d + 2:
        raise MalformedDataError(f"need at least d + 2 = {d + 2} rows, '{path}' has {n}")
    for k, name in enumerate(x_names):
        if not np.ptp(X[:, k]) > 0:
            raise ConstantColumnError(name)
    logger.info(f"Loaded {n} rows with inputs {x_names} from {path}")
    return Dataset(X=X, y=y, Z=Z, x_names=x_names, z_names=z_names, sha256=file_digest(path))


def load_points(path: PathLike, d: int) -> np.ndarray:
    """Query points for prediction; an empty file gives an empty (0, d) array"""
    frame = _read_frame(path)
    if frame.empty:
        return np.zeros((0, d))
    names = input_columns(frame) or list(frame.columns)
    if len(names) != d:
        raise MalformedDataError(f"points file has {len(names)} input columns, model expects {d}")
    return np.column_stack([_numeric(frame, c) for c in names])


def load_key_values(path: PathLike) -> Dict[str, str]:
    """``key = value`` lines; '#' starts a comment"""
    entries = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedDataError(f"{path}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def model_to_document(model: HyperplaneModel, prov: Provenance,
                      contextual: Optional[dict] = None) -> ModelDocument:
    grid = model.grid
    return ModelDocument(
        shape=model.shape.describe(),
        bandwidth=model.bandwidth.describe() if model.bandwidth else None,
        kernel=model.kernel.value if model.kernel else None,
        grid=GridDocument(
            points=grid.points.tolist(),
            provenance=grid.provenance.value,
            lattice_shape=list(grid.lattice_shape) if grid.lattice_shape else None,
            lattice_index=grid.lattice_index.tolist() if grid.lattice_index is not None else None,
            kept_index=grid.kept_index.tolist() if grid.kept_index is not None else None,
            hull_filtered=grid.hull_filtered,
        ),
        a=model.a.tolist(),
        b=model.b.tolist(),
        diagnostics=plain(model.diagnostics),
        contextual=contextual,
        provenance=prov,
    )


def model_from_document(doc: ModelDocument) -> HyperplaneModel:
    if doc.format != MODEL_FORMAT or doc.version != MODEL_VERSION:
        raise MalformedDataError(f"unsupported model document {doc.format} v{doc.version}")
    g = doc.grid
    points = np.asarray(g.points, dtype=float)
    grid = EvalGrid(
        points=points,
        provenance=GridProvenance(g.provenance),
        lattice_shape=tuple(g.lattice_shape) if g.lattice_shape else None,
        lattice_index=np.asarray(g.lattice_index, dtype=int) if g.lattice_index is not None else None,
        kept_index=np.asarray(g.kept_index, dtype=int) if g.kept_index is not None else None,
        hull_filtered=g.hull_filtered,
    )
    shape = ShapeSpec(
        curvature=Curvature(doc.shape["curvature"]),
        monotonicity=tuple(Monotonicity(m) for m in doc.shape["monotonicity"]),
        bounds=tuple(
            DerivativeBound(b["derivative"], _bound(b["lower"]), _bound(b["upper"]))
            for b in doc.shape.get("bounds", [])
        ),
    )
    bw = None
    if doc.bandwidth:
        bw = BandwidthSpec.knn(doc.bandwidth["k"]) if doc.bandwidth["mode"] == "knn" \
            else BandwidthSpec.fixed(doc.bandwidth["h"])
    return HyperplaneModel(
        grid=grid,
        a=np.asarray(doc.a, dtype=float),
        b=np.asarray(doc.b, dtype=float).reshape(points.shape),
        shape=shape,
        bandwidth=bw,
        kernel=Kernel(doc.kernel) if doc.kernel else None,
        diagnostics=dict(doc.diagnostics),
    )


def _bound(values):
    if values is None:
        return None
    return values[0] if len(values) == 1 else values


def plain(value):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats strings"""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else repr(value)
    return value


def write_json(path: PathLike, document) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if hasattr(document, "model_dump_json"):
        text = document.model_dump_json(indent=2)
    else:
        text = json.dumps(plain(document), indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def save_model(path: PathLike, doc: ModelDocument) -> Path:
    return write_json(path, doc)


def load_model(path: PathLike) -> HyperplaneModel:
    try:
        doc = ModelDocument.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MalformedDataError(f"model file '{path}' does not exist")
    except ValueError as exc:
        raise MalformedDataError(f"'{path}' is not a valid model document: {exc}")
    return model_from_document(doc)


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def grid_frame(model: HyperplaneModel) -> pd.DataFrame:
    """One row per evaluation point: x1..xd, lattice cells, provenance, a, b1..bd"""
    frame = model.grid.to_frame()
    frame["a"] = model.a
    for k in range(model.d):
        frame[f"b{k + 1}"] = model.b[:, k]
    return frame


def prediction_frame(points: np.ndarray, values: np.ndarray, extrapolated: np.ndarray) -> pd.DataFrame:
    d = points.shape[1]
    frame = pd.DataFrame(points, columns=[f"x{k + 1}" for k in range(d)])
    frame["prediction"] = np.asarray(values, dtype=float)
    frame["extrapolated"] = np.asarray(extrapolated, dtype=bool)
    return frame


def write_run(prefix: PathLike, experiment: str, config: dict, prov: Provenance,
              tables: Dict[str, pd.DataFrame], timings: Optional[dict] = None) -> List[Path]:
    """CSV tables plus a JSON metadata header; timings go to a separate sidecar file"""
    prefix = Path(prefix)
    written = []
    for name, frame in tables.items():
        written.append(write_csv(prefix.parent / f"{prefix.name}.{name}.csv", frame))
    meta = RunMetadata(experiment=experiment, config=plain(config), provenance=prov, tables=sorted(tables))
    written.append(write_json(prefix.parent / f"{prefix.name}.meta.json", meta))
    if timings is not None:
        write_json(prefix.parent / f"{prefix.name}.timings.json", timings)
    logger.info(f"Wrote {len(written)} report files under {prefix}")
    return written
