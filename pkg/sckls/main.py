"""Command-line entry point: fit, predict, test, simulate and bandwidth."""

from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

import numpy as np
import pandas as pd

from sckls import __version__
from sckls.config import get_settings
from sckls.errors import DegenerateHullError, DomainError, ScklsError
from sckls.models.request import FitOptions, TestOptions
from sckls.models.response import BandwidthReport, FitReport, TestReport
from sckls.services import data_io, plotting, seeding
from sckls.services.dgp import DgpSpec
from sckls.services.economics import marginal_stats, mpss
from sckls.services.estimators import ShapeSpec, predict, sckls_fit
from sckls.services.evaluation_grid import (
    EvalGrid,
    convex_hull_filter,
    counts_for_target,
    in_hull,
    percentile_grid,
    uniform_grid,
)
from sckls.services.kernel_weights import (
    BandwidthSpec,
    as_kernel,
    bandwidth_cv_scores,
    default_bandwidth_candidates,
    default_knn_candidates,
    knn_cv_scores,
    loocv_bandwidth,
    loocv_k,
)
from sckls.services.partially_linear import estimate_gamma
from sckls.services.shape_tests import BootstrapScheme, affinity_test, wild_bootstrap_shape_test
from sckls.services.simulation import (
    EXPERIMENTS,
    POWER_STUDIES,
    SWEEP_H,
    apply_overrides,
    bandwidth_sensitivity_sweep,
    experiment_preset,
    power_preset,
    run_power_study,
    run_rmse_experiment,
)

logger = logging.getLogger("sckls")


def _setup_logging(level: str):
    # stderr only; report files and stdout stay reproducible
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
        force=True,
    )


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _command_line(argv: List[str]) -> str:
    return " ".join(["sckls"] + list(argv))


def _r_squared(y: np.ndarray, fitted: np.ndarray) -> float:
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum((y - fitted) ** 2))
    return 1.0 - sse / sst if sst > 0 else float("nan")


def build_grid(opts: FitOptions, X: np.ndarray) -> EvalGrid:
    d = X.shape[1]
    if opts.grid.startswith("file:"):
        grid = EvalGrid.external(data_io.load_points(opts.grid[len("file:"):], d))
    else:
        counts = opts.grid_counts or counts_for_target(opts.grid_target, d)
        grid = percentile_grid(X, counts) if opts.grid == "percentile" else uniform_grid(X, counts)
    if opts.hull_filter:
        grid = convex_hull_filter(grid, X)
    logger.info(f"Evaluation grid: {grid.m} points ({grid.provenance.value})")
    return grid


def resolve_bandwidth(opts: FitOptions, X: np.ndarray, y: np.ndarray, threads: Optional[int] = None) -> BandwidthSpec:
    mode, values = opts.bandwidth_mode()
    kernel = as_kernel(opts.kernel)
    if mode == "fixed":
        return BandwidthSpec.fixed(values)
    if mode == "knn":
        if values:
            return BandwidthSpec.knn(int(values[0]))
        return BandwidthSpec.knn(loocv_k(X, y, kernel=kernel, threads=threads))
    candidates = opts.cv_grid if opts.cv_grid else None
    return BandwidthSpec.fixed(loocv_bandwidth(X, y, candidates, kernel, threads))


def _parse_direction(text: str, d: int) -> np.ndarray:
    direction = np.asarray(_floats(text), dtype=float)
    if direction.size != d:
        raise DomainError(f"MPSS direction '{text}' has {direction.size} entries, the data has {d} inputs")
    return direction


def cmd_fit(args: argparse.Namespace) -> int:
    opts = FitOptions(
        shape=args.shape,
        grid=args.grid,
        grid_counts=_ints(args.grid_counts) if args.grid_counts else None,
        grid_target=args.grid_target,
        hull_filter=args.hull_filter,
        bandwidth=args.bandwidth,
        kernel=args.kernel,
        cv_grid=_floats(args.cv_grid) if args.cv_grid else None,
        contextual=[c for c in (args.contextual or "").split(",") if c],
        seed=args.seed,
        lazy=not args.no_lazy,
    )
    data = data_io.load_dataset(args.data, y_column=args.y_column, z_columns=opts.contextual)
    X, y = data.X, data.y
    kernel = as_kernel(opts.kernel)
    shape = ShapeSpec.parse(opts.shape, data.d)

    contextual = None
    y_fit = y
    if data.Z is not None:
        contextual = estimate_gamma(data.Z, y, X, kernel=kernel, names=data.z_names)
        y_fit = contextual.adjusted_y

    grid = build_grid(opts, X)
    bw = resolve_bandwidth(opts, X, y_fit, args.threads)
    dump = f"{args.out}.qp" if args.dump_qp else None
    model = sckls_fit(X, y_fit, grid, bw, kernel, shape, lazy=opts.lazy, dump_qp=dump)

    fitted = predict(model, X)
    r2_raw = _r_squared(y, fitted + (y - y_fit))
    r2_adj = _r_squared(y_fit, fitted) if contextual is not None else None
    stats = marginal_stats(model)
    mpss_rows = [mpss(model, _parse_direction(text, data.d)) for text in args.mpss or []]

    prov = data_io.provenance(args.data, seed=opts.seed, command=args.command_line,
                              generator=seeding.GENERATOR_NAME)
    contextual_doc = contextual.to_document() if contextual is not None else None
    data_io.save_model(f"{args.out}.model.json", data_io.model_to_document(model, prov, contextual_doc))
    data_io.write_csv(f"{args.out}.grid.csv", data_io.grid_frame(model))
    data_io.write_csv(f"{args.out}.marginal.csv", stats.table.rename_axis("quantity").reset_index())
    if mpss_rows:
        data_io.write_csv(f"{args.out}.mpss.csv", pd.DataFrame([
            {"direction": text, **{k: v for k, v in row.to_document().items() if k != "point"},
             **{f"x{k + 1}": v for k, v in enumerate(row.point)}}
            for text, row in zip(args.mpss, mpss_rows)
        ]))
    report = FitReport(
        n=data.n,
        d=data.d,
        grid_size=grid.m,
        shape=shape.label(),
        bandwidth=bw.describe(),
        kernel=kernel.value,
        r_squared=r2_raw,
        r_squared_adjusted=r2_adj,
        marginal=data_io.plain(stats.to_document()),
        mpss=[row.to_document() for row in mpss_rows] or None,
        contextual=contextual_doc,
        diagnostics=data_io.plain(model.diagnostics),
        provenance=prov,
    )
    data_io.write_json(f"{args.out}.report.json", report)
    if args.emit_plot_data or args.plot:
        frame = plotting.plot_frame(model)
        data_io.write_csv(f"{args.out}.plot.csv", frame)
        if args.plot:
            plotting.write_svg(f"{args.out}.plot.svg", frame, X, y_fit, title=shape.label())

    print(f"n = {data.n}, d = {data.d}, evaluation points = {grid.m}, shape = {shape.label()}")
    print(f"bandwidth = {bw.describe()}, kernel = {kernel.value}")
    print(f"R^2 (raw y) = {r2_raw:.6f}")
    if r2_adj is not None:
        print(f"R^2 (contextual-adjusted y) = {r2_adj:.6f}")
        for row in contextual_doc["coefficients"]:
            print(f"  {row['name']}: gamma = {row['gamma']:.6g} (se {row['se']:.3g}, p = {row['p_value']:.3g})")
    print(stats.table.to_string(float_format=lambda v: f"{v:.6g}"))
    for text, row in zip(args.mpss or [], mpss_rows):
        print(f"MPSS along ({text}): t* = {row.t:.6g}, output = {row.output:.6g}")
    return 0


def _extrapolated(model, points: np.ndarray) -> np.ndarray:
    """Points outside the hull of the model's evaluation points"""
    try:
        return ~in_hull(model.grid.points, points)
    except DegenerateHullError as exc:
        logger.warning(f"{exc}; extrapolation is judged against the lower-dimensional hull")
        return ~in_hull(model.grid.points, points, require_interior=False)


def cmd_predict(args: argparse.Namespace) -> int:
    model = data_io.load_model(args.model)
    points = data_io.load_points(args.points, model.d)
    if points.shape[0] == 0:
        values = np.zeros(0)
        outside = np.zeros(0, dtype=bool)
    else:
        values = np.atleast_1d(model.predict(points))
        outside = _extrapolated(model, points)
    frame = data_io.prediction_frame(points, values, outside)
    data_io.write_csv(args.out, frame)
    logger.info(f"{points.shape[0]} predictions written to {args.out}, {int(outside.sum())} extrapolated")
    return 0


def _test_inputs(args: argparse.Namespace):
    data = data_io.load_dataset(args.data, y_column=args.y_column)
    opts = FitOptions(grid=args.grid, grid_counts=_ints(args.grid_counts) if args.grid_counts else None,
                      grid_target=args.grid_target, bandwidth=args.bandwidth, kernel=args.kernel,
                      seed=args.seed)
    grid = build_grid(opts, data.X)
    bw = resolve_bandwidth(opts, data.X, data.y, args.threads)
    return data, grid, bw, as_kernel(opts.kernel)


def cmd_test(args: argparse.Namespace) -> int:
    topts = TestOptions(B=args.B, scheme=args.scheme, alpha=args.alpha, seed=args.seed, use_delta=args.use_delta,
                        recentre=args.recentre, monotone_variant=args.monotone_variant,
                        homoscedastic=args.homoscedastic)
    data, grid, bw, kernel = _test_inputs(args)
    scheme = BootstrapScheme(topts.scheme, topts.B)
    if args.which == "shape":
        result = wild_bootstrap_shape_test(
            data.X, data.y, grid, bw, kernel, ShapeSpec.parse(args.shape, data.d), scheme,
            topts.alpha, topts.seed, topts.use_delta, topts.recentre, args.threads,
        )
    else:
        result = affinity_test(
            data.X, data.y, grid, bw, kernel, scheme, topts.alpha, topts.seed,
            topts.monotone_variant, topts.homoscedastic, args.threads,
        )
    prov = data_io.provenance(args.data, seed=topts.seed, command=args.command_line,
                              generator=seeding.GENERATOR_NAME)
    doc = result.to_document()
    doc["details"] = data_io.plain(doc["details"])
    data_io.write_json(args.out, TestReport(**doc, provenance=prov))
    decision = "reject" if result.reject else "do not reject"
    print(f"{args.which} test: T = {result.statistic:.6g}, p = {result.p_value:.4f}, "
          f"alpha = {topts.alpha} -> {decision}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides = data_io.load_key_values(args.config) if args.config else {}
    prov = data_io.provenance(seed=args.seed, command=args.command_line, generator=seeding.GENERATOR_NAME)
    prefix = Path(args.out) / args.experiment
    if args.experiment in EXPERIMENTS:
        config = apply_overrides(experiment_preset(args.experiment, args.d, args.n, args.reps, args.seed), overrides)
        report = run_rmse_experiment(config, args.threads)
        data_io.write_run(prefix, args.experiment, config.model_dump(mode="json"), prov,
                          {"summary": report.summary(), "records": report.records, "seeds": report.ledger},
                          report.timings)
        print(report.summary().to_string(index=False))
        return 0
    if args.experiment in POWER_STUDIES:
        config = apply_overrides(power_preset(args.experiment, args.n, args.reps, args.seed, d=args.d), overrides)
        report = run_power_study(config, args.threads)
        data_io.write_run(prefix, args.experiment, config.model_dump(mode="json"), prov,
                          {"rejection": report.table, "replicates": report.replicates}, report.timings)
        print(report.table.to_string(index=False))
        return 0
    spec = DgpSpec.cobb_douglas(args.d or 2, args.n or 100)
    spec = apply_overrides(spec, {k[len("dgp."):]: v for k, v in overrides.items() if k.startswith("dgp.")})
    h_values = _floats(overrides["h"]) if "h" in overrides else list(SWEEP_H)
    reps = args.reps or 10
    report = bandwidth_sensitivity_sweep(spec, h_values, reps=reps, seed=args.seed, threads=args.threads)
    config = {"dgp": spec.model_dump(mode="json"), "h": h_values, "reps": reps, "seed": args.seed}
    data_io.write_run(prefix, "sweep", config, prov, {"curves": report.curves, "loocv": report.loocv},
                      report.timings)
    print(report.curves.to_string(index=False))
    return 0


def cmd_bandwidth(args: argparse.Namespace) -> int:
    data = data_io.load_dataset(args.data, y_column=args.y_column)
    kernel = as_kernel(args.kernel)
    if args.knn:
        ks = _ints(args.candidates) if args.candidates else default_knn_candidates(data.X)
        selected = [float(loocv_k(data.X, data.y, ks, kernel, args.threads))]
        candidates = [[float(k)] for k in sorted(ks)]
        scores = knn_cv_scores(data.X, data.y, sorted(ks), kernel, args.threads)
        mode = "knn"
    else:
        raw = _floats(args.candidates) if args.candidates else default_bandwidth_candidates(data.X)
        selected = loocv_bandwidth(data.X, data.y, raw, kernel, args.threads).tolist()
        hs = [BandwidthSpec.fixed(h).h_vector(data.d) for h in raw]
        candidates = [h.tolist() for h in hs]
        scores = bandwidth_cv_scores(data.X, data.y, hs, kernel, args.threads)
        mode = "fixed"
    prov = data_io.provenance(args.data, command=args.command_line)
    report = BandwidthReport(mode=mode, selected=selected, candidates=candidates,
                             scores=[float(s) for s in scores], kernel=kernel.value, provenance=prov)
    if args.out:
        data_io.write_json(args.out, report)
    print(f"{mode} bandwidth: {selected}")
    return 0


def _add_grid_options(p: argparse.ArgumentParser):
    p.add_argument("--grid", default="uniform", help="uniform | percentile | file:<points.csv>")
    p.add_argument("--grid-counts", help="points per input, e.g. 20 or 20,15")
    p.add_argument("--grid-target", type=int, default=400, help="approximate total grid size")
    p.add_argument("--bandwidth", default="auto", help="auto | fixed:h1[,h2..] | knn:auto | knn:K")
    p.add_argument("--kernel", choices=["gaussian", "epanechnikov"])
    p.add_argument("--y-column", default="y")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sckls",
        description="Shape-constrained kernel-weighted least squares: fitting, prediction and shape tests",
    )
    parser.add_argument("--version", action="version", version=f"sckls {__version__}")
    parser.add_argument("--threads", type=int, help="worker cap (defaults to SCKLS_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a shape-constrained model to a CSV file")
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", default="sckls_fit", help="output prefix")
    fit.add_argument("--shape", default="concave-increasing")
    _add_grid_options(fit)
    fit.add_argument("--hull-filter", action="store_true")
    fit.add_argument("--cv-grid", help="comma-separated bandwidth candidates for auto selection")
    fit.add_argument("--contextual", help="comma-separated contextual columns, e.g. z1,z2")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--no-lazy", action="store_true", help="impose every concavity row at once")
    fit.add_argument("--mpss", action="append", metavar="DIRECTION", help="input ray, e.g. 1,1; repeatable")
    fit.add_argument("--dump-qp", action="store_true", help="write the final QP in Matrix Market form")
    fit.add_argument("--emit-plot-data", action="store_true")
    fit.add_argument("--plot", action="store_true", help="also render an SVG")
    fit.set_defaults(handler=cmd_fit)

    pred = sub.add_parser("predict", help="evaluate a saved model at new points")
    pred.add_argument("--model", required=True)
    pred.add_argument("--points", required=True)
    pred.add_argument("--out", default="predictions.csv")
    pred.set_defaults(handler=cmd_predict)

    test = sub.add_parser("test", help="wild bootstrap shape or affinity test")
    test.add_argument("which", choices=["shape", "affinity"])
    test.add_argument("--data", required=True)
    test.add_argument("--out", default="test_report.json")
    test.add_argument("--shape", default="concave-increasing")
    _add_grid_options(test)
    test.add_argument("--B", type=int, default=200)
    test.add_argument("--scheme", default="rademacher", choices=["rademacher", "mammen"])
    test.add_argument("--alpha", type=float, default=0.05)
    test.add_argument("--seed", type=int, default=0)
    test.add_argument("--use-delta", action="store_true")
    test.add_argument("--recentre", action="store_true")
    test.add_argument("--monotone-variant", action="store_true")
    test.add_argument("--homoscedastic", action="store_true")
    test.set_defaults(handler=cmd_test)

    sim = sub.add_parser("simulate", help="Monte Carlo experiments")
    sim.add_argument("--experiment", required=True, choices=list(EXPERIMENTS) + list(POWER_STUDIES) + ["sweep"])
    sim.add_argument("--config", help="plain-text 'key = value' overrides")
    sim.add_argument("--d", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="results")
    sim.set_defaults(handler=cmd_simulate)

    bw = sub.add_parser("bandwidth", help="leave-one-out bandwidth or k selection")
    bw.add_argument("--data", required=True)
    bw.add_argument("--knn", action="store_true")
    bw.add_argument("--candidates", help="comma-separated h (or k with --knn) values")
    bw.add_argument("--kernel", choices=["gaussian", "epanechnikov"])
    bw.add_argument("--y-column", default="y")
    bw.add_argument("--out")
    bw.set_defaults(handler=cmd_bandwidth)
    return parser


def _banner(title: str, error: Exception, hint: str = ""):
    logger.error("=" * 80)
    logger.error(title)
    logger.error("=" * 80)
    logger.error(f"Error: {error}")
    if hint:
        logger.error("")
        logger.error(hint)
    logger.error("=" * 80)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        settings = get_settings()
    except ValueError as e:
        _setup_logging("INFO")
        _banner("FATAL ERROR: Failed to load configuration", e, "Check the SCKLS_* environment variables.")
        return 2
    _setup_logging(settings.log_level)
    args = build_parser().parse_args(argv)
    args.command_line = _command_line(argv)
    try:
        return args.handler(args)
    except ScklsError as e:
        _banner(f"ERROR: {type(e).__name__}", e)
        return e.exit_code
    except ValueError as e:
        _banner("ERROR: invalid option", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
