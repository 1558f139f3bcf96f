"""Scenarios, deviation metrics and repeated-seed experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraModel, Distortion, look_at, project_points, rig_from_dict, rig_to_dict
from .curve import CurveParams, SegmentGrid, equidistant, integrate_frame
from .icp import IcpProblem, SolverConfig, SolverError, solve
from .raster import BinaryImage, extract_pixels, render_views

logger = logging.getLogger(__name__)

EVAL_SAMPLES = 1000
DEFAULT_BOUNDARIES = (0.0, 75.0, 130.0, 190.0)


class ScenarioError(ValueError):
    pass


def _hermite_theta(knots: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Continuous C1 Hermite profile through per-boundary curvature knots ``(S+1, 2)``.

    Knot slopes are central differences of the knot values.
    """
    slopes = np.gradient(knots, boundaries, axis=0)
    S = len(boundaries) - 1
    theta = np.empty((S, 2, 4))
    for i in range(S):
        theta[i, :, 0] = knots[i]
        theta[i, :, 1] = slopes[i]
        theta[i, :, 2] = knots[i + 1]
        theta[i, :, 3] = slopes[i + 1]
    return theta


@dataclass
class Scenario:
    """Ground-truth robot, camera rig and rendering settings."""

    name: str
    grid: SegmentGrid
    truth: CurveParams
    rig: list[CameraModel]
    dilation_radius: int = 15
    root_seed: int = 12345
    raster_spacing_mm: float = 0.05

    @property
    def image_size(self) -> tuple[int, int]:
        return self.rig[0].image_size

    def truth_samples(self, n: int = EVAL_SAMPLES) -> np.ndarray:
        s = equidistant(self.grid, n)
        return integrate_frame(self.truth, self.grid, s, method="rk45").points

    def base_hints(self) -> list[np.ndarray]:
        """Projected base point per view (the base pose is known a priori)."""
        return [project_points(cam, self.truth.base_position[None])[0][0] for cam in self.rig]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "boundaries": self.grid.boundaries.tolist(),
            "truth_theta": self.truth.theta.tolist(),
            "base_position": self.truth.base_position.tolist(),
            "base_orientation": self.truth.base_orientation.tolist(),
            "cameras": rig_to_dict(self.rig)["cameras"],
            "dilation_radius": self.dilation_radius,
            "root_seed": self.root_seed,
            "raster_spacing_mm": self.raster_spacing_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        required = {"name", "boundaries", "truth_theta", "cameras"}
        optional = {"base_position", "base_orientation", "dilation_radius", "root_seed", "raster_spacing_mm"}
        missing = required - set(d)
        extra = set(d) - required - optional
        if missing or extra:
            raise ScenarioError(f"scenario keys: missing {sorted(missing)}, unknown {sorted(extra)}")
        try:
            grid = SegmentGrid(np.asarray(d["boundaries"], dtype=float))
            truth = CurveParams(np.asarray(d["truth_theta"], dtype=float),
                                np.asarray(d.get("base_position", [0.0, 0.0, 0.0]), dtype=float),
                                np.asarray(d.get("base_orientation", np.eye(3)), dtype=float))
            if truth.theta.shape != (grid.n_segments, 2, 4):
                raise ScenarioError(f"truth_theta shape {truth.theta.shape} does not match the grid")
            rig = rig_from_dict({"cameras": d["cameras"]})
            sc = cls(str(d["name"]), grid, truth, rig, int(d.get("dilation_radius", 15)),
                     int(d.get("root_seed", 12345)), float(d.get("raster_spacing_mm", 0.05)))
        except ScenarioError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc
        if sc.dilation_radius < 0 or not sc.raster_spacing_mm > 0:
            raise ScenarioError("dilation_radius must be >= 0 and raster_spacing_mm > 0")
        return sc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def default_rig(target=(0.0, 0.0, 95.0), distance: float = 560.0, azimuths_deg=(-35.0, 35.0),
                elevation_deg: float = 10.0, focal_px: float = 3000.0,
                image_size=(2448, 2048), dist: Distortion | None = None) -> list[CameraModel]:
    w, h = image_size
    K = np.array([[focal_px, 0.0, (w - 1) / 2.0], [0.0, focal_px, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    dist = dist or Distortion(k1=-0.08, k2=0.05, k3=0.0, p1=2e-4, p2=-1e-4)
    target = np.asarray(target, dtype=float)
    rig = []
    el = math.radians(elevation_deg)
    for az in azimuths_deg:
        a = math.radians(az)
        pos = target + distance * np.array([math.cos(el) * math.cos(a), math.cos(el) * math.sin(a), math.sin(el)])
        R, t = look_at(pos, target)
        rig.append(CameraModel(R, t, K.copy(), dist, tuple(image_size)))
    return rig


def default_scenario() -> Scenario:
    """Three-segment robot bending in both planes, seen by two cameras 70 degrees apart."""
    boundaries = np.array(DEFAULT_BOUNDARIES)
    # curvature knots (1/mm) at the segment boundaries, columns u_x, u_y
    knots = np.array([[0.002, 0.003], [0.004, 0.006], [-0.002, 0.009], [-0.005, 0.012]])
    grid = SegmentGrid(boundaries)
    truth = CurveParams(_hermite_theta(knots, boundaries), np.zeros(3), np.eye(3))
    pts = integrate_frame(truth, grid, equidistant(grid, 200), method="rk45").points
    centre = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    return Scenario("default", grid, truth, default_rig(target=centre))


def generate_images(scenario: Scenario) -> tuple[list[BinaryImage], list[int]]:
    """Dense rasterisation of the truth curve followed by disk dilation."""
    n = int(math.ceil(scenario.grid.length / scenario.raster_spacing_mm)) + 1
    s = np.linspace(0.0, scenario.grid.length, n)
    pts = integrate_frame(scenario.truth, scenario.grid, s, method="rk45").points
    return render_views(scenario.rig, pts, scenario.dilation_radius)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def distance_to_polyline(points: np.ndarray, polyline: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distance from each point to the nearest segment of ``polyline``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    poly = np.asarray(polyline, dtype=float).reshape(-1, 3)
    if len(poly) == 1:
        return np.linalg.norm(points - poly[0], axis=1)
    a = poly[:-1]
    d = poly[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd_safe = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        q = points[lo:lo + chunk, None, :] - a[None]
        t = np.clip(np.einsum("nmk,mk->nm", q, d) / dd_safe, 0.0, 1.0)
        t = np.where(dd > 0, t, 0.0)
        r = q - t[..., None] * d[None]
        out[lo:lo + chunk] = np.sqrt(np.einsum("nmk,nmk->nm", r, r).min(axis=1))
    return out


def recon_samples(theta, grid: SegmentGrid, base_position=None, base_orientation=None,
                  n: int = EVAL_SAMPLES) -> np.ndarray:
    params = CurveParams(np.asarray(theta, dtype=float).reshape(-1, 2, 4),
                         np.zeros(3) if base_position is None else base_position,
                         np.eye(3) if base_orientation is None else base_orientation)
    return integrate_frame(params, grid, equidistant(grid, n), method="rk45").points


def max_deviation_recon_to_truth(theta, scenario: Scenario, n: int = EVAL_SAMPLES) -> float:
    """Largest distance from the sampled reconstruction to the sampled truth polyline (mm)."""
    recon = recon_samples(theta, scenario.grid, scenario.truth.base_position,
                          scenario.truth.base_orientation, n)
    return float(distance_to_polyline(recon, scenario.truth_samples(n)).max())


def max_deviation_points_to_recon(points, theta, scenario: Scenario, n: int = EVAL_SAMPLES) -> float:
    """Largest distance from measured 3D points to the sampled reconstruction polyline (mm)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("need at least one measured point")
    recon = recon_samples(theta, scenario.grid, scenario.truth.base_position,
                          scenario.truth.base_orientation, n)
    return float(distance_to_polyline(points, recon).max())


def perturb_calibration(rig, rotation_rad: float = 0.0, translation_mm: float = 0.0,
                        intrinsic_rel: float = 0.0, seed: int = 0) -> list[CameraModel]:
    """Rig with every camera's pose and intrinsics randomly disturbed.

    Rotations get a random axis and exactly ``rotation_rad``; translations a
    random direction of length ``translation_mm``; focal lengths and principal
    point are scaled by ``1 + intrinsic_rel * U(-1, 1)``.
    """
    if min(rotation_rad, translation_mm, intrinsic_rel) < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for cam in rig:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        factors = 1.0 + intrinsic_rel * rng.uniform(-1.0, 1.0, size=4)
        R = Rotation.from_rotvec(rotation_rad * axis).as_matrix() @ cam.R if rotation_rad else cam.R
        t = cam.t + translation_mm * direction
        K = cam.K.copy()
        if intrinsic_rel:
            K[0, 0] *= factors[0]
            K[1, 1] *= factors[1]
            K[0, 2] *= factors[2]
            K[1, 2] *= factors[3]
        out.append(CameraModel(R, t, K, cam.dist, cam.image_size))
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def derive_seeds(root_seed: int, n: int) -> list[int]:
    return [int(x) for x in np.random.SeedSequence(root_seed).generate_state(n, dtype=np.uint32)]


@dataclass
class SeedRun:
    seed: int
    max_dev_mm: float
    seconds: float
    converged: bool
    error: str = ""
    trace: dict = field(default_factory=dict)
    theta: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class RunReport:
    scenario: str
    config: dict
    warmstart: str
    runs: list[SeedRun] = field(default_factory=list)

    def _devs(self) -> np.ndarray:
        return np.array([r.max_dev_mm for r in self.runs if not r.failed])

    @property
    def mean(self) -> float:
        d = self._devs()
        return float(d.mean()) if d.size else math.nan

    @property
    def min(self) -> float:
        d = self._devs()
        return float(d.min()) if d.size else math.nan

    @property
    def max(self) -> float:
        d = self._devs()
        return float(d.max()) if d.size else math.nan

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.runs)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config": self.config,
            "warmstart": self.warmstart,
            "mean_max_dev_mm": self.mean,
            "min_max_dev_mm": self.min,
            "max_max_dev_mm": self.max,
            "n_failed": self.n_failed,
            "runs": [vars(r) for r in self.runs],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "max_dev_mm", "seconds", "converged"])
            for r in self.runs:
                w.writerow([r.seed, f"{r.max_dev_mm:.17g}", f"{r.seconds:.3f}", int(r.converged)])


def write_plot_csv(series: dict, path) -> None:
    """Long-format ``label,seed,max_dev_mm`` table, one row per run, for boxplots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "seed", "max_dev_mm"])
        for label, report in series.items():
            for r in report.runs:
                if not r.failed:
                    w.writerow([label, r.seed, f"{r.max_dev_mm:.17g}"])


def build_problem(scenario: Scenario, images, config: SolverConfig, rig=None, theta0=None) -> IcpProblem:
    pixels = [extract_pixels(im, v) for v, im in enumerate(images)]
    return IcpProblem(rig or scenario.rig, pixels, scenario.grid, p=config.p, n_nodes=config.n_nodes,
                      theta0=theta0, base_position=scenario.truth.base_position,
                      base_orientation=scenario.truth.base_orientation)


def warmstart_theta(scenario: Scenario, images, rig=None) -> np.ndarray:
    from .epipolar import warmstart_from_images

    ws = warmstart_from_images(images, rig or scenario.rig, scenario.base_hints(), scenario.grid,
                               scenario.truth.base_position, scenario.truth.base_orientation)
    return ws.theta


def run_experiment(scenario: Scenario, config: SolverConfig, n_seeds: int, warmstart: str = "none",
                   images=None, rig=None, seeds=None) -> RunReport:
    """Solve once per derived seed and collect the max-deviation statistic.

    ``rig`` overrides the calibration given to the solver (the images are always
    rendered with the scenario's true rig).
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if images is None:
        images, _ = generate_images(scenario)
    seeds = list(seeds) if seeds is not None else derive_seeds(scenario.root_seed, n_seeds)
    report = RunReport(scenario.name, config.to_dict(), warmstart)
    theta0 = None
    if warmstart == "epipolar":
        theta0 = warmstart_theta(scenario, images, rig)
    for seed in seeds[:n_seeds]:
        cfg = replace(config, seed=seed)
        t0 = time.perf_counter()
        try:
            problem = build_problem(scenario, images, cfg, rig, theta0)
            theta, trace = solve(problem, cfg)
            dev = max_deviation_recon_to_truth(theta, scenario)
            run = SeedRun(seed, dev, time.perf_counter() - t0, trace.converged,
                          trace=trace.summary(), theta=np.asarray(theta).tolist())
        except (SolverError, ArithmeticError) as exc:
            logger.warning("seed %d failed: %s", seed, exc)
            run = SeedRun(seed, math.nan, time.perf_counter() - t0, False, error=str(exc))
        logger.info("seed %d: max deviation %.4f mm in %.1f s", seed, run.max_dev_mm, run.seconds)
        report.runs.append(run)
    return report
