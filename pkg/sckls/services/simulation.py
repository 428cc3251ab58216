"""Monte Carlo drivers: RMSE experiments, test size/power studies, bandwidth sweeps."""

from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, field_validator
from scipy.optimize import curve_fit

from sckls.config import get_settings
from sckls.errors import DomainError, ScklsError, ShapeConsistencyError
from sckls.services import seeding
from sckls.services.dgp import DgpSample, DgpSpec, gen_dgp
from sckls.services.estimators import ShapeSpec, cnls_fit, local_linear_fit, predict, sckls_fit_weighted
from sckls.services.evaluation_grid import EvalGrid, counts_for_target, percentile_grid, uniform_grid
from sckls.services.kernel_weights import BandwidthSpec, loocv_bandwidth, loocv_k, weight_matrix
from sckls.services.local_linear import normal_equations, solve_normal_equations, weighted_objective
from sckls.services.partially_linear import estimate_gamma
from sckls.services.shape_tests import BootstrapKind, BootstrapScheme, affinity_test, wild_bootstrap_shape_test

logger = logging.getLogger(__name__)


class EstimatorName(str, Enum):
    SCKLS = "sckls"
    SCKLS_KNN = "sckls_knn"
    SCKLS_Z = "sckls_z"
    LL = "ll"
    CNLS = "cnls"
    COBB_DOUGLAS = "cobb_douglas"


class GridKind(str, Enum):
    UNIFORM = "uniform"
    PERCENTILE = "percentile"


class HypothesisTest(str, Enum):
    SHAPE = "shape"
    AFFINITY = "affinity"


class ExperimentConfig(BaseModel):
    """Estimators x n x d x m cells, each replicated ``reps`` times"""

    name: str = "exp1"
    dgp: DgpSpec = DgpSpec()
    estimators: List[EstimatorName] = [EstimatorName.SCKLS, EstimatorName.LL, EstimatorName.CNLS]
    n_list: List[int] = [100]
    d_list: List[int] = [2]
    m_list: List[int] = [400]
    grid: GridKind = GridKind.UNIFORM
    shape: str = "concave-increasing"
    reps: int = 10
    seed: int = 0

    @field_validator('reps')
    @classmethod
    def validate_reps(cls, v):
        if v < 1:
            raise ValueError(f'reps must be at least 1, got {v}')
        return v

    @field_validator('n_list', 'd_list', 'm_list')
    @classmethod
    def validate_sizes(cls, v, info):
        if not v or min(v) < 1:
            raise ValueError(f'{info.field_name} must be a non-empty list of positive integers')
        return v


class Scenario(BaseModel):
    name: str
    dgp: DgpSpec


class PowerStudyConfig(BaseModel):
    test: HypothesisTest = HypothesisTest.SHAPE
    scenarios: List[Scenario]
    reps: int = 50
    B: int = 200
    alphas: List[float] = [0.05, 0.01]
    scheme: BootstrapKind = BootstrapKind.RADEMACHER
    grid_counts: int = 20
    shape: str = "concave-increasing"
    monotone_variant: bool = False
    homoscedastic: bool = False
    seed: int = 0

    @field_validator('alphas')
    @classmethod
    def validate_alphas(cls, v):
        if not v or any(not 0 < a < 1 for a in v):
            raise ValueError('every alpha must lie in (0, 1)')
        return v


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: pd.DataFrame
    ledger: pd.DataFrame
    timings: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        """Mean and sample sd of both RMSEs per (d, n, m, estimator) cell"""
        keys = ["d", "n", "m", "estimator"]
        ok = self.records[self.records["status"] == "ok"]
        agg = ok.groupby(keys, sort=True).agg(
            rmse_obs_mean=("rmse_obs", "mean"),
            rmse_obs_sd=("rmse_obs", "std"),
            rmse_eval_mean=("rmse_eval", "mean"),
            rmse_eval_sd=("rmse_eval", "std"),
            completed=("rmse_obs", "size"),
        )
        total = self.records.groupby(keys, sort=True).size().rename("planned")
        out = agg.reindex(total.index).join(total).reset_index()
        out["completed"] = out["completed"].fillna(0).astype(int)
        out["incomplete"] = out["completed"] < out["planned"]
        return out

    @property
    def incomplete(self) -> bool:
        return bool((self.records["status"] != "ok").any())


@dataclass
class PowerReport:
    config: PowerStudyConfig
    replicates: pd.DataFrame
    table: pd.DataFrame
    timings: Dict[str, float] = field(default_factory=dict)


@dataclass
class SweepReport:
    curves: pd.DataFrame
    loocv: pd.DataFrame
    sckls_better: List[str]
    timings: Dict[str, float] = field(default_factory=dict)


def rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    diff = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(diff * diff)))


def self_check(sample: DgpSample) -> None:
    """The truth has zero RMSE against itself"""
    if rmse(sample.g0, sample.truth(sample.X)) != 0.0:
        raise ScklsError("harness self-check failed: RMSE of the truth against itself is not zero")


def _grid(kind: GridKind, X: np.ndarray, m_target: int) -> EvalGrid:
    counts = counts_for_target(m_target, X.shape[1])
    return percentile_grid(X, counts) if kind is GridKind.PERCENTILE else uniform_grid(X, counts)


def _checked_sckls(X, y, grid: EvalGrid, bw: BandwidthSpec, shape: ShapeSpec):
    """SCKLS fit plus the check that its objective is not below the unconstrained one"""
    W = weight_matrix(X, grid, bw).w
    model = sckls_fit_weighted(X, y, grid, W, shape, bw=bw)
    system = normal_equations(X, y, grid.points, W)
    if not system.singular.any():
        theta = solve_normal_equations(system)
        r_tilde = float(weighted_objective(X, y, grid.points, W, theta[:, 0], theta[:, 1:]).sum())
        r_hat = float(weighted_objective(X, y, grid.points, W, model.a, model.b).sum())
        if r_hat < r_tilde - 1e-9 * max(1.0, r_tilde):
            raise ShapeConsistencyError(f"SCKLS objective {r_hat:.12g} below local linear {r_tilde:.12g}")
    return model


def cobb_douglas_fit(X: np.ndarray, y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Nonlinear least-squares fit of c * prod_k x_k^beta_k"""
    d = X.shape[1]

    def f(Xt, c, *beta):
        return c * np.prod(np.power(Xt.T, np.asarray(beta)), axis=1)

    try:
        params, _ = curve_fit(f, X.T, y, p0=[1.0] + [0.8 / d] * d, maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise ScklsError(f"Cobb-Douglas least squares did not converge: {exc}")
    c, beta = params[0], params[1:]
    return lambda Q: c * np.prod(np.power(np.atleast_2d(Q), beta), axis=1)


def _fit(estimator: EstimatorName, sample: DgpSample, grid: EvalGrid, h: np.ndarray,
         shape: ShapeSpec) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Fitted values at the observations and at the evaluation points"""
    X, y = sample.X, sample.y
    if estimator is EstimatorName.SCKLS:
        model = _checked_sckls(X, y, grid, BandwidthSpec.fixed(h), shape)
        return predict(model, X), model.a, {"bandwidth": h.tolist()}
    if estimator is EstimatorName.SCKLS_KNN:
        k = loocv_k(X, y)
        model = _checked_sckls(X, y, grid, BandwidthSpec.knn(k), shape)
        return predict(model, X), model.a, {"bandwidth": k}
    if estimator is EstimatorName.SCKLS_Z:
        if sample.Z is None:
            raise ScklsError("sckls_z needs a process with contextual variables")
        contextual = estimate_gamma(sample.Z, y, X)
        y_adj = contextual.adjusted_y
        h_adj = loocv_bandwidth(X, y_adj)
        model = _checked_sckls(X, y_adj, grid, BandwidthSpec.fixed(h_adj), shape)
        return predict(model, X), model.a, {"bandwidth": h_adj.tolist(), "gamma": contextual.gamma.tolist()}
    if estimator is EstimatorName.LL:
        bw = BandwidthSpec.fixed(h)
        return local_linear_fit(X, y, X, bw).a, local_linear_fit(X, y, grid, bw).a, {"bandwidth": h.tolist()}
    if estimator is EstimatorName.CNLS:
        model = cnls_fit(X, y, shape)
        return predict(model, X), predict(model, grid.points), {}
    g = cobb_douglas_fit(X, y)
    return g(X), g(grid.points), {}


def _replicate(config: ExperimentConfig, d: int, n: int, m_target: int, rep: int):
    spec = config.dgp.model_copy(update={"d": d, "n": n, "seed": seeding.derive_seed(config.seed, d, n)})
    started = time.perf_counter()
    sample = gen_dgp(spec, rep)
    self_check(sample)
    shape = ShapeSpec.parse(config.shape, d)
    grid = _grid(config.grid, sample.X, m_target)
    g_grid = sample.truth(grid.points)
    h = None
    records = []
    for estimator in config.estimators:
        record = {"d": d, "n": n, "m": m_target, "grid_size": grid.m, "estimator": estimator.value,
                  "replication": rep, "rmse_obs": np.nan, "rmse_eval": np.nan, "status": "ok", "extra": ""}
        try:
            if h is None and estimator in (EstimatorName.SCKLS, EstimatorName.LL):
                h = loocv_bandwidth(sample.X, sample.y)
            fit_obs, fit_eval, extra = _fit(estimator, sample, grid, h, shape)
            record.update(rmse_obs=rmse(fit_obs, sample.g0), rmse_eval=rmse(fit_eval, g_grid),
                          extra=repr(extra) if extra else "")
        except ScklsError as exc:
            logger.warning(f"{estimator.value} failed at d={d}, n={n}, m={m_target}, rep={rep}: {exc}")
            record["status"] = f"failed: {type(exc).__name__}"
        records.append(record)
    ledger = {"d": d, "n": n, "m": m_target, "replication": rep, "cell_seed": spec.seed,
              "data_key": f"({seeding.DATA}, {rep})", "noise_key": f"({seeding.NOISE}, {rep})"}
    return records, ledger, time.perf_counter() - started


def run_rmse_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentReport:
    """RMSE of every estimator against the truth at observations and evaluation points"""
    tasks = [
        (d, n, m, rep)
        for d, n, m in product(config.d_list, config.n_list, config.m_list)
        for rep in range(config.reps)
    ]
    n_jobs = threads or get_settings().threads
    logger.info(f"Experiment {config.name}: {len(tasks)} replications on {n_jobs} worker(s)")
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_replicate)(config, d, n, m, rep) for d, n, m, rep in tasks
    )
    records = pd.DataFrame([r for rows, _, _ in results for r in rows])
    ledger = pd.DataFrame([entry for _, entry, _ in results])
    timings = {f"d={d},n={n},m={m},rep={rep}": t for (d, n, m, rep), (_, _, t) in zip(tasks, results)}
    report = ExperimentReport(config=config, records=records, ledger=ledger, timings=timings)
    if report.incomplete:
        logger.warning(f"Experiment {config.name} has failed replications; see the status column")
    return report


def _power_replicate(config: PowerStudyConfig, s: int, rep: int) -> dict:
    scenario = config.scenarios[s]
    spec = scenario.dgp.model_copy(update={"seed": seeding.derive_seed(config.seed, s)})
    test_seed = seeding.derive_seed(config.seed, s, rep)
    row = {"scenario": scenario.name, "replication": rep, "seed": test_seed,
           "statistic": np.nan, "p_value": np.nan, "status": "ok"}
    try:
        sample = gen_dgp(spec, rep)
        self_check(sample)
        grid = uniform_grid(sample.X, config.grid_counts)
        bw = BandwidthSpec.fixed(loocv_bandwidth(sample.X, sample.y))
        scheme = BootstrapScheme(config.scheme, config.B)
        if config.test is HypothesisTest.SHAPE:
            result = wild_bootstrap_shape_test(
                sample.X, sample.y, grid, bw, shape=ShapeSpec.parse(config.shape, spec.d),
                scheme=scheme, seed=test_seed, threads=1,
            )
        else:
            result = affinity_test(
                sample.X, sample.y, grid, bw, scheme=scheme, seed=test_seed,
                monotone_variant=config.monotone_variant, homoscedastic=config.homoscedastic, threads=1,
            )
        row.update(statistic=result.statistic, p_value=result.p_value)
    except ScklsError as exc:
        logger.warning(f"scenario {scenario.name} replication {rep} failed: {exc}")
        row["status"] = f"failed: {type(exc).__name__}"
    return row


def run_power_study(config: PowerStudyConfig, threads: Optional[int] = None) -> PowerReport:
    """Rejection rate per scenario and alpha over Monte Carlo replications"""
    tasks = [(s, rep) for s in range(len(config.scenarios)) for rep in range(config.reps)]
    n_jobs = threads or get_settings().threads
    started = time.perf_counter()
    rows = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_power_replicate)(config, s, rep) for s, rep in tasks
    )
    replicates = pd.DataFrame(rows)
    table = []
    for scenario in config.scenarios:
        ok = replicates[(replicates["scenario"] == scenario.name) & (replicates["status"] == "ok")]
        for alpha in config.alphas:
            p = ok["p_value"].to_numpy()
            table.append({
                "scenario": scenario.name,
                "alpha": alpha,
                "rejection_rate": float(np.mean(p < alpha)) if p.size else np.nan,
                "completed": int(p.size),
                "planned": config.reps,
            })
    table = pd.DataFrame(table)
    logger.info(f"Power study finished: {len(tasks)} replications")
    return PowerReport(config=config, replicates=replicates, table=table,
                       timings={"total": time.perf_counter() - started})


def _h_label(h: np.ndarray) -> str:
    return "x".join(repr(float(v)) for v in np.atleast_1d(h))


def bandwidth_sensitivity_sweep(
    spec: DgpSpec,
    h_values: Sequence[Union[float, Sequence[float]]],
    reps: int = 10,
    m_target: int = 400,
    shape: str = "concave-increasing",
    seed: int = 0,
    threads: Optional[int] = None,
) -> SweepReport:
    """Mean RMSE of SCKLS and local linear for each fixed bandwidth, on shared datasets"""
    if not len(h_values):
        raise ScklsError("bandwidth sweep needs at least one h value")
    spec = spec.model_copy(update={"seed": seeding.derive_seed(seed, spec.d, spec.n)})
    shp = ShapeSpec.parse(shape, spec.d)
    started = time.perf_counter()

    def one(rep: int):
        sample = gen_dgp(spec, rep)
        self_check(sample)
        grid = uniform_grid(sample.X, counts_for_target(m_target, spec.d))
        g_grid = sample.truth(grid.points)
        rows = []
        for h in h_values:
            h = BandwidthSpec.fixed(h).h_vector(spec.d)
            for estimator in (EstimatorName.SCKLS, EstimatorName.LL):
                row = {"h": _h_label(h), "estimator": estimator.value, "replication": rep,
                       "rmse_obs": np.nan, "rmse_eval": np.nan}
                try:
                    fit_obs, fit_eval, _ = _fit(estimator, sample, grid, h, shp)
                    row.update(rmse_obs=rmse(fit_obs, sample.g0), rmse_eval=rmse(fit_eval, g_grid))
                except ScklsError as exc:
                    logger.debug(f"sweep h={_h_label(h)} {estimator.value} rep={rep} failed: {exc}")
                rows.append(row)
        h_cv = loocv_bandwidth(sample.X, sample.y)
        return rows, {"replication": rep, "h": _h_label(h_cv)}

    n_jobs = threads or get_settings().threads
    results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(rep) for rep in range(reps))
    long = pd.DataFrame([r for rows, _ in results for r in rows])
    order = {_h_label(BandwidthSpec.fixed(h).h_vector(spec.d)): i for i, h in enumerate(h_values)}
    curves = long.groupby(["h", "estimator"], sort=False).agg(
        rmse_obs_mean=("rmse_obs", "mean"),
        rmse_eval_mean=("rmse_eval", "mean"),
        failed=("rmse_obs", lambda s: int(s.isna().sum())),
    ).reset_index()
    curves["order"] = curves["h"].map(order)
    curves = curves.sort_values(["order", "estimator"]).drop(columns="order").reset_index(drop=True)
    wide = curves.pivot(index="h", columns="estimator", values="rmse_obs_mean")
    better = [h for h in sorted(order, key=order.get)
              if h in wide.index and wide.loc[h, "sckls"] <= wide.loc[h, "ll"]]
    loocv = pd.DataFrame([entry for _, entry in results])
    return SweepReport(curves=curves, loocv=loocv, sckls_better=better,
                       timings={"total": time.perf_counter() - started})


EXPERIMENTS = ("exp1", "exp4", "nonuniform", "low-snr", "s-shape", "contextual")
POWER_STUDIES = ("shape-test", "affinity-test")
SWEEP_H = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def experiment_preset(name: str, d: Optional[int] = None, n: Optional[int] = None,
                      reps: Optional[int] = None, seed: int = 0) -> ExperimentConfig:
    """RMSE experiment definitions; d, n and reps override the preset sizes"""
    base = {"name": name, "seed": seed}
    estimators = [EstimatorName.SCKLS, EstimatorName.LL, EstimatorName.CNLS, EstimatorName.COBB_DOUGLAS]
    if name == "exp1":
        cfg = dict(dgp=DgpSpec.cobb_douglas(2, 100), estimators=estimators, m_list=[400])
    elif name == "exp4":
        cfg = dict(dgp=DgpSpec.cobb_douglas(2, 400), estimators=[EstimatorName.SCKLS, EstimatorName.LL],
                   n_list=[400], m_list=[100, 300, 500])
    elif name == "nonuniform":
        cfg = dict(dgp=DgpSpec.cobb_douglas(2, 100, input_law="trunc_exp", rate=3.0),
                   estimators=estimators, grid=GridKind.PERCENTILE)
    elif name == "low-snr":
        cfg = dict(dgp=DgpSpec.cobb_douglas(2, 100, sigma=1.3), estimators=estimators)
    elif name == "s-shape":
        cfg = dict(dgp=DgpSpec.s_shape(100, d=d or 2), estimators=[EstimatorName.SCKLS, EstimatorName.LL, EstimatorName.CNLS])
    elif name == "contextual":
        cfg = dict(dgp=DgpSpec.cobb_douglas(2, 400, contextual=1, gamma=5.0),
                   estimators=[EstimatorName.SCKLS_Z], n_list=[400])
    else:
        raise DomainError(f"unknown experiment '{name}'; choose from {', '.join(EXPERIMENTS)}")
    config = ExperimentConfig(**base, **cfg)
    update = {}
    if d is not None:
        update["d_list"] = [d]
    else:
        update["d_list"] = [config.dgp.d]
    if n is not None:
        update["n_list"] = [n]
    elif "n_list" not in cfg:
        update["n_list"] = [config.dgp.n]
    if reps is not None:
        update["reps"] = reps
    return config.model_copy(update=update)


POWER_SIZES = (100, 300, 500)
SHAPE_TEST_SIGMAS = (0.1, 0.2)
AFFINITY_POWERS = (0.2, 0.5, 1.0, 2.0, 5.0)


def power_preset(name: str, n: Optional[int] = None, reps: Optional[int] = None, seed: int = 0,
                 d: Optional[int] = None) -> PowerStudyConfig:
    """Power study definitions.

    Shape test: constant (A, size), x^2 (B) and sigmoid (C) over sigma x n.
    Affinity test: x^p over p x d x n with the ordinary bootstrap; p = 1 is
    the size scenario. ``n`` and ``d`` narrow the grid to one value.
    """
    sizes = [n] if n is not None else list(POWER_SIZES)
    if name == "shape-test":
        if d not in (None, 1):
            raise DomainError("the shape-test study has one input")
        scenarios = []
        for sigma in SHAPE_TEST_SIGMAS:
            for size in sizes:
                label = f"n={size},sigma={sigma}"
                scenarios += [
                    Scenario(name=f"A {label}", dgp=DgpSpec.power_test(0.0, size, sigma=sigma)),
                    Scenario(name=f"B {label}", dgp=DgpSpec.power_test(2.0, size, sigma=sigma)),
                    Scenario(name=f"C {label}", dgp=DgpSpec.sigmoid_test(size, sigma=sigma)),
                ]
        return PowerStudyConfig(test=HypothesisTest.SHAPE, scenarios=scenarios, reps=reps or 200, seed=seed)
    if name == "affinity-test":
        dims = [d] if d is not None else [1, 2]
        scenarios = [
            Scenario(name=f"p={p:g},d={dim},n={size}", dgp=DgpSpec.affinity(p, size, d=dim))
            for dim in dims for size in sizes for p in AFFINITY_POWERS
        ]
        return PowerStudyConfig(test=HypothesisTest.AFFINITY, scenarios=scenarios, reps=reps or 100,
                                B=500, alphas=[0.05], homoscedastic=True, seed=seed)
    raise DomainError(f"unknown power study '{name}'; choose from {', '.join(POWER_STUDIES)}")


def apply_overrides(config: BaseModel, entries: Dict[str, str]) -> BaseModel:
    """Set fields from ``key = value`` text; ``dgp.sigma`` reaches into the process spec.

    In a power study a ``dgp.*`` key applies to every scenario. List fields
    take comma-separated values.
    """
    data = config.model_dump(mode="json")

    def assign(target: dict, key: str, value: str):
        if key not in target:
            raise DomainError(f"unknown configuration key '{key}'")
        current = target[key]
        if isinstance(current, list):
            target[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif isinstance(current, bool):
            target[key] = value.strip().lower() in ("1", "true", "yes", "on")
        else:
            target[key] = value

    for key, value in entries.items():
        if key.startswith("dgp."):
            field_name = key[len("dgp."):]
            targets = [s["dgp"] for s in data["scenarios"]] if "scenarios" in data else [data["dgp"]]
            for target in targets:
                assign(target, field_name, value)
        else:
            assign(data, key, value)
    try:
        return type(config).model_validate(data)
    except ValueError as exc:
        raise DomainError(f"invalid configuration: {exc}")
