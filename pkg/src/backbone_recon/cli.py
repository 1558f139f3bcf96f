"""Command-line interface: simulate, reconstruct, warmstart, evaluate, export-plot.

Exit codes: 0 success, 2 configuration error, 3 numeric or solver error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import BehindCameraError, CalibrationFormatError, DegenerateGeometryError, load_calibration, save_calibration
from .curve import CurveNumericError, CurveParams, equidistant, integrate_frame, read_samples_csv, write_samples_csv
from .epipolar import (CorrespondenceError, SegmentationError, WarmStartError, WarmStartPoints,
                       fit_initial_guess, warmstart_from_images)
from .evaluation import (EVAL_SAMPLES, RunReport, Scenario, ScenarioError, SeedRun, build_problem,
                         default_scenario, distance_to_polyline, generate_images, run_experiment,
                         write_plot_csv)
from .icp import ConfigError, SolverConfig, SolverError, solve
from .raster import EmptyImageError, PGMFormatError, read_pgm, write_pgm

logger = logging.getLogger("backbone_recon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
LOG_ENV = "BACKBONE_RECON_LOG"
_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValueError):
    """Invalid combination of command-line inputs."""


def _configure_logging() -> None:
    name = os.environ.get(LOG_ENV, "warn").strip().lower()
    if name not in _LOG_LEVELS:
        raise UsageError(f"{LOG_ENV} must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------------------
# input loading (all of it happens before any computation)
# ---------------------------------------------------------------------------


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_scenario(args) -> Scenario:
    if args.scenario in (None, "default"):
        sc = default_scenario()
    else:
        sc = Scenario.load(_existing(args.scenario, "scenario"))
    if getattr(args, "calib", None):
        rig = load_calibration(_existing(args.calib, "calibration"))
        sc = replace(sc, rig=rig)
    return sc


def _load_solver_config(args) -> SolverConfig:
    cfg = SolverConfig.load(_existing(args.solver_config, "solver config")) if args.solver_config else SolverConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_images(args, scenario: Scenario):
    paths = [_existing(p, "image") for p in args.images]
    if len(paths) != len(scenario.rig):
        raise UsageError(f"{len(paths)} images given for {len(scenario.rig)} cameras")
    images = [read_pgm(p) for p in paths]
    for k, (im, cam) in enumerate(zip(images, scenario.rig)):
        if (im.width, im.height) != tuple(cam.image_size):
            raise UsageError(f"image {paths[k]} is {im.width}x{im.height}, camera {k} expects "
                             f"{cam.image_size[0]}x{cam.image_size[1]}")
    return images


def _parse_warmstart(value: str):
    if value in ("none", "epipolar"):
        return value, None
    if value.startswith("file:") and len(value) > 5:
        return "file", Path(value[5:])
    raise UsageError(f"--warmstart must be none, epipolar or file:PATH, got {value!r}")


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    sc = _load_scenario(args)
    if args.dilation is not None:
        if args.dilation < 0:
            raise UsageError("--dilation must be >= 0")
        sc = replace(sc, dilation_radius=args.dilation)
    out = _prepare_out(args.out)
    images, skipped = generate_images(sc)
    for k, im in enumerate(images):
        write_pgm(im, out / f"cam{k}.pgm")
    s = equidistant(sc.grid, EVAL_SAMPLES)
    write_samples_csv(out / "truth.csv", s, sc.truth_samples(EVAL_SAMPLES))
    sc.save(out / "scenario.json")
    save_calibration(sc.rig, out / "calib.json")
    logger.info("wrote %d images (%s white pixels, %s points off-frame) to %s",
                len(images), [im.n_white for im in images], skipped, out)
    return EXIT_OK


def _theta_document(theta, sc: Scenario, cfg: SolverConfig, trace, warmstart: str) -> dict:
    return {
        "theta": np.asarray(theta).reshape(sc.grid.n_segments, 2, 4).tolist(),
        "boundaries": sc.grid.boundaries.tolist(),
        "base_position": sc.truth.base_position.tolist(),
        "base_orientation": sc.truth.base_orientation.tolist(),
        "solver_config": cfg.to_dict(),
        "warmstart": warmstart,
        "converged": trace.converged,
        "reason": trace.reason,
        "final_cost": trace.epoch_costs[-1] if trace.epoch_costs else None,
        "iterations": len(trace.rows),
    }


def cmd_reconstruct(args) -> int:
    sc = _load_scenario(args)
    cfg = _load_solver_config(args)
    mode, ws_path = _parse_warmstart(args.warmstart)
    ws_points = WarmStartPoints.read_csv(_existing(str(ws_path), "warm-start file")) if mode == "file" else None
    images = _load_images(args, sc)
    out = _prepare_out(args.out)

    theta0 = None
    if mode == "epipolar":
        ws = warmstart_from_images(images, sc.rig, sc.base_hints(), sc.grid,
                                   sc.truth.base_position, sc.truth.base_orientation)
        ws.points.write_csv(out / "warmstart.csv")
        theta0 = ws.theta
    elif mode == "file":
        theta0 = fit_initial_guess(ws_points, sc.grid, sc.truth.base_position, sc.truth.base_orientation).theta

    problem = build_problem(sc, images, cfg, theta0=theta0)
    try:
        theta, trace = solve(problem, cfg)
    except SolverError as exc:
        if exc.trace is not None:
            exc.trace.write_csv(out / "trace.csv", timing=not args.no_timing)
            raise SolverError(f"{exc} (partial trace in {out / 'trace.csv'})", exc.trace) from exc
        raise
    trace.write_csv(out / "trace.csv", timing=not args.no_timing)
    _write_json(out / "theta.json", _theta_document(theta, sc, cfg, trace, args.warmstart))
    s = equidistant(sc.grid, EVAL_SAMPLES)
    params = CurveParams(np.asarray(theta).reshape(-1, 2, 4), sc.truth.base_position, sc.truth.base_orientation)
    write_samples_csv(out / "recon.csv", s, integrate_frame(params, sc.grid, s, method="rk45").points)
    violations = trace.violations(full_batch_only=True)
    if violations:
        logger.warning("%d full-batch reassignments increased the cost", len(violations))
    logger.info("reconstruction finished: %s, %d iterations", trace.reason, len(trace.rows))
    return EXIT_OK


def cmd_warmstart(args) -> int:
    sc = _load_scenario(args)
    images = _load_images(args, sc)
    out = _prepare_out(args.out)
    ws = warmstart_from_images(images, sc.rig, sc.base_hints(), sc.grid,
                               sc.truth.base_position, sc.truth.base_orientation)
    ws.points.write_csv(out / "warmstart.csv")
    for sk in ws.skeletons:
        sk.write_csv(out / f"skeleton{sk.view}.csv")
    _write_json(out / "theta0.json", {
        "theta": np.asarray(ws.theta).reshape(sc.grid.n_segments, 2, 4).tolist(),
        "rms_mm": ws.fit.rms_mm,
        "pairs": len(ws.pairs),
        "skipped_left_pixels": ws.pairs.skipped,
    })
    return EXIT_OK


def _read_curve(path: str, what: str):
    s, pts = read_samples_csv(_existing(path, what))
    if len(pts) < 2:
        raise UsageError(f"{path}: need at least two samples")
    return s, pts


def cmd_evaluate(args) -> int:
    if args.recon:
        s_r, recon = _read_curve(args.recon, "reconstruction CSV")
        report = {"recon": args.recon}
        if args.truth:
            s_t, truth = _read_curve(args.truth, "truth CSV")
            if not np.isclose(s_r[-1], s_t[-1], rtol=1e-9, atol=1e-9):
                raise UsageError(f"curve lengths differ: recon {s_r[-1]} mm, truth {s_t[-1]} mm")
            report["max_dev_recon_to_truth_mm"] = float(distance_to_polyline(recon, truth).max())
        if args.points:
            _, pts = read_samples_csv(_existing(args.points, "measured points CSV"))
            if len(pts) == 0:
                raise UsageError(f"{args.points}: no measured points")
            report["max_dev_points_to_recon_mm"] = float(distance_to_polyline(pts, recon).max())
        if len(report) == 1:
            raise UsageError("evaluate --recon needs --truth and/or --points")
        out = _prepare_out(args.out)
        _write_json(out / "evaluation.json", report)
        print(json.dumps(report, sort_keys=True))
        return EXIT_OK

    sc = _load_scenario(args)
    cfg = _load_solver_config(args)
    mode, ws_path = _parse_warmstart(args.warmstart)
    if mode == "file":
        raise UsageError("evaluate supports --warmstart none or epipolar")
    if args.seeds < 1 or args.threads < 1:
        raise UsageError("--seeds and --threads must be >= 1")
    out = _prepare_out(args.out)
    report = _run_seeds(sc, cfg, args.seeds, mode, args.threads)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    print(f"mean {report.mean:.4f} mm, min {report.min:.4f} mm, max {report.max:.4f} mm, "
          f"failed {report.n_failed}/{len(report.runs)}")
    return EXIT_OK


def _one_seed(sc: Scenario, cfg: SolverConfig, seed: int, mode: str) -> SeedRun:
    return run_experiment(sc, cfg, 1, mode, seeds=[seed]).runs[0]


def _run_seeds(sc: Scenario, cfg: SolverConfig, n: int, mode: str, threads: int) -> RunReport:
    from .evaluation import derive_seeds

    if threads == 1:
        return run_experiment(sc, cfg, n, mode)
    from concurrent.futures import ProcessPoolExecutor

    seeds = derive_seeds(sc.root_seed, n)
    report = RunReport(sc.name, cfg.to_dict(), mode)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        report.runs = list(pool.map(_one_seed, [sc] * n, [cfg] * n, seeds, [mode] * n))
    return report


def cmd_export_plot(args) -> int:
    series = {}
    for item in args.reports:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        data = json.loads(_existing(path, "report").read_text(encoding="utf-8"))
        try:
            runs = [SeedRun(**r) for r in data["runs"]]
        except (KeyError, TypeError) as exc:
            raise UsageError(f"{path}: not a run report ({exc})") from exc
        series[label] = RunReport(data.get("scenario", ""), data.get("config", {}), data.get("warmstart", ""), runs)
    out = _prepare_out(args.out)
    write_plot_csv(series, out / "plot.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backbone-recon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver=False, images=False):
        p.add_argument("--scenario", default="default", help="scenario JSON or 'default'")
        p.add_argument("--calib", help="calibration JSON overriding the scenario cameras")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the solver config seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes for multi-seed runs")
        if solver:
            p.add_argument("--solver-config", help="solver config JSON")
            p.add_argument("--warmstart", default="none", help="none | epipolar | file:PATH")
        if images:
            p.add_argument("--images", nargs="+", required=True, help="one binary PGM per camera")

    p = sub.add_parser("simulate", help="render binary images and truth samples")
    common(p)
    p.add_argument("--dilation", type=int, help="override the dilation radius in pixels")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="fit the backbone to binary images")
    common(p, solver=True, images=True)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the trace seconds column")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("warmstart", help="epipolar initial guess from two images")
    common(p, images=True)
    p.set_defaults(func=cmd_warmstart)

    p = sub.add_parser("evaluate", help="deviation metrics or repeated-seed experiments")
    common(p, solver=True)
    p.add_argument("--seeds", type=int, default=1, help="number of derived seeds to run")
    p.add_argument("--recon", help="reconstruction samples CSV (metric mode)")
    p.add_argument("--truth", help="truth samples CSV for the reconstruction-to-truth metric")
    p.add_argument("--points", help="measured points CSV for the points-to-reconstruction metric")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-plot", help="merge run reports into one boxplot CSV")
    p.add_argument("reports", nargs="+", help="LABEL=report.json (label defaults to the file stem)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot)
    return parser


_CONFIG_ERRORS = (UsageError, ConfigError, ScenarioError, CalibrationFormatError, WarmStartError)
_NUMERIC_ERRORS = (SolverError, ArithmeticError, CurveNumericError, BehindCameraError, DegenerateGeometryError,
                   SegmentationError, CorrespondenceError, EmptyImageError)
_IO_ERRORS = (OSError, PGMFormatError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _IO_ERRORS as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
