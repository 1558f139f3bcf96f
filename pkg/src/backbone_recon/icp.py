"""Iterative-closest-point curve fitting of a projected 3D curve to robot pixels.

Every robot pixel is matched to the closest projected reconstruction node
(pixel-to-reconstruction direction only) and the summed p-th power distance

    J = sum_views sum_pixels || beta_i - nu_{j*(i)} ||_p^p

is reduced over the curve parameters. Two solvers alternate between the two
sub-problems:

* ``solve_multistep`` minimises J fully (L-BFGS) before every reassignment;
* ``solve_onestep`` takes a single descent step (Adam or Armijo gradient)
  per reassignment, on mini-batches of pixels.

Reassignment at fixed parameters never increases J; both solvers record
that check at every reassignment.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np
from scipy.optimize import minimize

from .camera import BEHIND_CAMERA_PENALTY_PX, project_points
from .curve import CurveParams, SegmentGrid, equidistant, integrate_frame, param_scale

logger = logging.getLogger(__name__)

_CHUNK = 16384


class SolverError(RuntimeError):
    def __init__(self, message: str, trace: SolveTrace | None = None):
        super().__init__(message)
        self.trace = trace


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Solver settings; the JSON form uses the same field names.

    ``param_unit`` is the curvature (1/mm) represented by one optimiser unit;
    ``None`` means ``1/delta_l`` per segment, i.e. one unit bends its segment
    by one radian.
    Slope coefficients are additionally scaled by their segment length.
    """

    method: str = "one_step"
    p: float = 2.0
    alpha: float = 0.2
    alpha_schedule: list | None = None
    batch_size: int = 4000
    n_nodes: int = 40
    epochs: int = 10
    seed: int = 12345
    optimizer: str = "adaptive"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    param_unit: float | None = None
    inner_max_iter: int = 200
    armijo_c: float = 1e-4
    stagnation_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.method not in ("one_step", "multi_step"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.optimizer not in ("adaptive", "armijo"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.inner_max_iter < 1:
            raise ConfigError("inner_max_iter must be >= 1")
        if not self.p >= 1:
            raise ConfigError("p must be >= 1")
        if self.n_nodes < 2:
            raise ConfigError("n_nodes must be >= 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.alpha_schedule is not None:
            sched = [(int(n), float(a)) for n, a in self.alpha_schedule]
            if not sched or any(n < 1 or a <= 0 for n, a in sched):
                raise ConfigError("alpha_schedule entries must be [epochs >= 1, alpha > 0]")
            self.alpha_schedule = [list(e) for e in sched]

    def alpha_at(self, epoch: int) -> float:
        if not self.alpha_schedule:
            return self.alpha
        done = 0
        for n, a in self.alpha_schedule:
            done += n
            if epoch < done:
                return a
        return self.alpha_schedule[-1][1]

    @classmethod
    def from_dict(cls, d: dict) -> SolverConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown solver config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> SolverConfig:
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


@dataclass
class ProjectedNodes:
    nu: np.ndarray  # (N, 2) pixels
    valid: np.ndarray  # (N,) bool, False behind the camera
    dnu: np.ndarray | None  # (N, 2, P)


class NodeModel(Protocol):
    pixel_sets: list[np.ndarray]
    p: float
    n_params: int

    def project_nodes(self, theta: np.ndarray, jacobian: bool = True) -> list[ProjectedNodes]: ...

    def param_scale(self, unit: float | None) -> np.ndarray: ...


@dataclass
class IcpProblem:
    """Backbone reconstruction from robot pixels in calibrated views."""

    rig: list
    pixel_sets: list[np.ndarray]
    grid: SegmentGrid
    p: float = 2.0
    n_nodes: int = 40
    theta0: np.ndarray | None = None
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.n_nodes < 2:
            raise ValueError("need at least two reconstruction nodes")
        if len(self.rig) != len(self.pixel_sets):
            raise ValueError("one pixel set per camera required")
        self.pixel_sets = [np.asarray(getattr(ps, "coords", ps), dtype=float).reshape(-1, 2)
                           for ps in self.pixel_sets]
        if not any(len(ps) for ps in self.pixel_sets):
            raise ValueError("all pixel sets are empty")
        if self.theta0 is None:
            self.theta0 = np.zeros(self.grid.n_params)
        self.theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        self.node_arc_lengths = equidistant(self.grid, self.n_nodes)

    @property
    def n_params(self) -> int:
        return self.grid.n_params

    def params(self, theta: np.ndarray) -> CurveParams:
        return CurveParams(np.asarray(theta, dtype=float).reshape(-1, 2, 4),
                           self.base_position, self.base_orientation)

    def param_scale(self, unit: float | None) -> np.ndarray:
        return param_scale(self.grid, unit)

    def project_nodes(self, theta, jacobian: bool = True) -> list[ProjectedNodes]:
        samples = integrate_frame(self.params(theta), self.grid, self.node_arc_lengths,
                                  sensitivities=jacobian)
        out = []
        for cam in self.rig:
            if jacobian:
                uv, valid, J = project_points(cam, samples.points, jacobian=True)
                out.append(ProjectedNodes(uv, valid, J @ samples.sensitivities))
            else:
                uv, valid = project_points(cam, samples.points)
                out.append(ProjectedNodes(uv, valid, None))
        return out


@dataclass
class ArcToyProblem:
    """Planar toy: fit the radius of a circular arc of fixed length.

    Both arcs start at the origin heading along +x; the observed "pixels" are
    samples of the true arc at the node arc lengths, so the global optimum has
    zero cost.
    """

    true_radius: float = 10.0
    length: float = 10.0
    n_nodes: int = 12
    p: float = 2.0

    def __post_init__(self) -> None:
        self.s = np.linspace(0.0, self.length, self.n_nodes)
        self.pixel_sets = [self._points(self.true_radius)]
        self.theta0 = np.array([2.0 * self.true_radius])

    n_params = 1

    def _points(self, r: float) -> np.ndarray:
        a = self.s / r
        return np.column_stack([r * np.sin(a), r * (1.0 - np.cos(a))])

    def param_scale(self, unit: float | None) -> np.ndarray:
        return np.ones(1)

    def project_nodes(self, theta, jacobian: bool = True) -> list[ProjectedNodes]:
        r = float(np.asarray(theta).reshape(-1)[0])
        a = self.s / r
        nu = self._points(r)
        dnu = None
        if jacobian:
            dx = np.sin(a) - a * np.cos(a)
            dy = 1.0 - np.cos(a) - a * np.sin(a)
            dnu = np.stack([dx, dy], axis=1)[:, :, None]
        return [ProjectedNodes(nu, np.ones(self.n_nodes, dtype=bool), dnu)]


# ---------------------------------------------------------------------------
# correspondence and cost
# ---------------------------------------------------------------------------


def _pow_dist(diff: np.ndarray, p: float) -> np.ndarray:
    return np.sum(np.abs(diff) ** p, axis=-1)


def behind_camera_penalty(p: float) -> float:
    """Cost term of a pixel matched to a node behind the camera."""
    return BEHIND_CAMERA_PENALTY_PX ** p


def assign_closest(pixels: np.ndarray, nodes: np.ndarray, p: float = 2.0,
                   valid: np.ndarray | None = None) -> np.ndarray:
    """Index of the node minimising ``||pixel - node||_p^p`` for every pixel.

    Ties resolve to the lowest node index. Nodes flagged invalid (behind the
    camera) sit at the constant penalty distance.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
    out = np.empty(len(pixels), dtype=np.int64)
    bad = None if valid is None or np.all(valid) else ~np.asarray(valid)
    for lo in range(0, len(pixels), _CHUNK):
        d = _pow_dist(pixels[lo:lo + _CHUNK, None, :] - nodes[None, :, :], p)
        if bad is not None:
            d[:, bad] = behind_camera_penalty(p)
        out[lo:lo + _CHUNK] = np.argmin(d, axis=1)
    return out


def _valid_jacobian(nodes: ProjectedNodes) -> np.ndarray:
    # nodes without a valid projection carry no pixels' gradient, and their
    # Jacobian may be non-finite
    return np.where(nodes.valid[:, None, None], nodes.dnu, 0.0)


def _pair_terms(pixels, nodes: ProjectedNodes, assign, p):
    diff = pixels - nodes.nu[assign]
    ok = nodes.valid[assign]
    terms = np.where(ok, _pow_dist(np.where(ok[:, None], diff, 0.0), p), behind_camera_penalty(p))
    return terms, diff, ok


def cost(theta, assignments, problem: NodeModel, batch=None, nodes=None, gradient: bool = True):
    """Cost ``J`` and its gradient with respect to ``theta`` for fixed correspondences.

    Args:
        theta: Parameter vector.
        assignments: Per view, node index for every pixel of that view.
        problem: Node model and pixel sets.
        batch: Optional per-view pixel index arrays; the batch cost is rescaled
            by ``M_total / batch_size`` so it estimates the full cost.
        nodes: Pre-computed projections at ``theta`` (with Jacobians if
            ``gradient``).
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ArithmeticError("non-finite parameters")
    if nodes is None:
        nodes = problem.project_nodes(theta, jacobian=gradient)
    p = problem.p
    total = 0.0
    grad = np.zeros(problem.n_params)
    m_total = sum(len(ps) for ps in problem.pixel_sets)
    m_used = 0
    for v, (pix, nd) in enumerate(zip(problem.pixel_sets, nodes)):
        idx = slice(None) if batch is None else batch[v]
        px = pix[idx]
        if len(px) == 0:
            continue
        a = np.asarray(assignments[v])[idx]
        terms, diff, ok = _pair_terms(px, nd, a, p)
        total += float(np.sum(terms))
        m_used += len(px)
        if gradient:
            if p == 2:
                g_pix = -2.0 * diff
            else:
                g_pix = -p * np.abs(diff) ** (p - 1) * np.sign(diff)
            g_pix[~ok] = 0.0
            n = nd.nu.shape[0]
            g_node = np.zeros((n, 2))
            g_node[:, 0] = np.bincount(a, weights=g_pix[:, 0], minlength=n)
            g_node[:, 1] = np.bincount(a, weights=g_pix[:, 1], minlength=n)
            grad += np.einsum("nk,nkp->p", g_node, _valid_jacobian(nd))
    factor = m_total / m_used if (batch is not None and m_used) else 1.0
    return total * factor, grad * factor


def full_cost(theta, problem: NodeModel) -> float:
    """``J`` with correspondences recomputed at ``theta``."""
    nodes = problem.project_nodes(theta, jacobian=False)
    assign = [assign_closest(px, nd.nu, problem.p, nd.valid) for px, nd in zip(problem.pixel_sets, nodes)]
    return cost(theta, assign, problem, nodes=nodes, gradient=False)[0]


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    iter: int
    epoch: int
    cost: float
    reassignments: int
    step: float
    seconds: float


@dataclass
class MonitorEvent:
    iter: int
    cost_old: float
    cost_new: float
    full_batch: bool

    def violated(self, rel_tol: float = 1e-12) -> bool:
        return self.cost_new > self.cost_old + rel_tol * abs(self.cost_old)


@dataclass
class SolveTrace:
    rows: list[TraceRow] = field(default_factory=list)
    epoch_costs: list[float] = field(default_factory=list)
    monitor: list[MonitorEvent] = field(default_factory=list)
    theta: np.ndarray | None = None
    converged: bool = False
    reason: str = ""

    def violations(self, full_batch_only: bool = True, rel_tol: float = 1e-12) -> list[MonitorEvent]:
        return [e for e in self.monitor
                if e.violated(rel_tol) and (e.full_batch or not full_batch_only)]

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "epoch", "cost", "reassignments", "step", "seconds"])
            for r in self.rows:
                w.writerow([r.iter, r.epoch, f"{r.cost:.17g}", r.reassignments, f"{r.step:.17g}",
                            f"{r.seconds:.6f}" if timing else "0"])

    def summary(self) -> dict:
        return {
            "iterations": len(self.rows),
            "epochs": len(self.epoch_costs),
            "final_cost": self.epoch_costs[-1] if self.epoch_costs else None,
            "epoch_costs": list(self.epoch_costs),
            "converged": self.converged,
            "reason": self.reason,
            "monitor_events": len(self.monitor),
            "monitor_violations_full_batch": len(self.violations(True)),
            "monitor_violations_batch": len(self.violations(False)) - len(self.violations(True)),
        }


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _epoch_batches(sizes, batch_size: int, rng: np.random.Generator):
    """Disjoint batches of at most ``batch_size`` pixels covering every pixel once.

    Each view is shuffled and split into the same number of near-equal parts,
    so no batch is a small remainder with a large rescale factor.
    """
    n_batches = max(1, math.ceil(sum(sizes) / batch_size))
    if n_batches == 1:
        return [[np.arange(m) for m in sizes]]
    parts = [np.array_split(rng.permutation(m), n_batches) for m in sizes]
    return [list(b) for b in zip(*parts)]


class _Reassigner:
    """Keeps per-pixel correspondences and checks the non-increase property."""

    def __init__(self, problem: NodeModel, trace: SolveTrace):
        self.problem = problem
        self.trace = trace
        self.assign = [np.full(len(ps), -1, dtype=np.int64) for ps in problem.pixel_sets]

    def __call__(self, it: int, nodes: list[ProjectedNodes], batch, full_batch: bool) -> int:
        p = self.problem.p
        changes = 0
        j_old = j_new = 0.0
        comparable = True
        for v, (pix, nd) in enumerate(zip(self.problem.pixel_sets, nodes)):
            idx = batch[v]
            if len(idx) == 0:
                continue
            px = pix[idx]
            new = assign_closest(px, nd.nu, p, nd.valid)
            old = self.assign[v][idx]
            changes += int(np.sum(new != old))
            if np.all(old >= 0):
                j_old += float(np.sum(_pair_terms(px, nd, old, p)[0]))
                j_new += float(np.sum(_pair_terms(px, nd, new, p)[0]))
            else:
                comparable = False
            self.assign[v][idx] = new
        if comparable:
            ev = MonitorEvent(it, j_old, j_new, full_batch)
            self.trace.monitor.append(ev)
            if ev.violated():
                logger.warning("reassignment increased the cost at iteration %d (%.6g -> %.6g)",
                               it, j_old, j_new)
        return changes


def _armijo_step(theta, J, g, scale, assign, problem, batch, alpha0, c):
    gz = g * scale
    gg = float(gz @ gz)
    if gg == 0.0:
        return theta, 0.0, J
    alpha = alpha0
    for _ in range(80):
        trial = theta - alpha * gz * scale
        # oversized trial steps may wrap the curve far outside the frame; just back off
        with np.errstate(over="ignore", invalid="ignore"):
            J_trial = cost(trial, assign, problem, batch=batch, gradient=False)[0]
        if np.isfinite(J_trial) and J_trial <= J - c * alpha * gg:
            return trial, alpha, J_trial
        alpha *= 0.5
    return theta, 0.0, J


def solve_onestep(problem: NodeModel, config: SolverConfig | None = None, theta0=None):
    """One descent step per correspondence update.

    Returns ``(theta, trace)``.
    """
    cfg = config or SolverConfig()
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(getattr(problem, "theta0", None) if theta0 is None else theta0, dtype=float).reshape(-1)
    scale = problem.param_scale(cfg.param_unit)
    sizes = [len(ps) for ps in problem.pixel_sets]
    trace = SolveTrace()
    reassign = _Reassigner(problem, trace)
    m = np.zeros_like(theta)
    v2 = np.zeros_like(theta)
    t_adam = 0
    armijo_alpha = None
    it = 0
    t0 = time.perf_counter()
    prev_full = None
    for epoch in range(cfg.epochs):
        alpha = cfg.alpha_at(epoch)
        batches = _epoch_batches(sizes, cfg.batch_size, rng)
        full_batch = len(batches) == 1
        for batch in batches:
            nodes = problem.project_nodes(theta, jacobian=True)
            changes = reassign(it, nodes, batch, full_batch)
            J, g = cost(theta, reassign.assign, problem, batch=None if full_batch else batch, nodes=nodes)
            if not np.all(np.isfinite(g)):
                raise SolverError(f"non-finite gradient at iteration {it}", trace)
            if cfg.optimizer == "adaptive":
                gz = g * scale
                t_adam += 1
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * gz
                v2 = cfg.beta2 * v2 + (1.0 - cfg.beta2) * gz * gz
                m_hat = m / (1.0 - cfg.beta1 ** t_adam)
                v_hat = v2 / (1.0 - cfg.beta2 ** t_adam)
                theta = theta - alpha * m_hat / (np.sqrt(v_hat) + cfg.eps) * scale
                step = alpha
            else:
                start = alpha if armijo_alpha is None else 2.0 * armijo_alpha
                theta, step, _ = _armijo_step(theta, J, g, scale, reassign.assign, problem,
                                              None if full_batch else batch, start, cfg.armijo_c)
                armijo_alpha = step if step > 0 else armijo_alpha
            trace.rows.append(TraceRow(it, epoch, J, changes, step, time.perf_counter() - t0))
            it += 1
        J_full = full_cost(theta, problem)
        trace.epoch_costs.append(J_full)
        if prev_full is not None and abs(prev_full - J_full) <= cfg.stagnation_tol * abs(prev_full):
            trace.converged, trace.reason = True, "cost stagnated"
            break
        prev_full = J_full
    else:
        trace.reason = "epoch budget exhausted"
    trace.theta = theta
    return theta, trace


def _inner_lbfgs(theta, J_start, assign, problem, batch, scale, cfg):
    norm = J_start if J_start > 0 else 1.0
    # (J/J0)^(2/p) has the same minimiser as J but is far better
    # conditioned for quasi-Newton steps when p > 2
    expo = 2.0 / problem.p

    def fun(z):
        J, g = cost(z * scale, assign, problem, batch=batch)
        f = (J / norm) ** expo
        return f, expo * f / J * g * scale if J > 0 else 0.0 * g

    res = minimize(fun, theta / scale, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.inner_max_iter, "ftol": 1e-12, "gtol": 1e-9})
    if not np.all(np.isfinite(res.x)):
        return theta, J_start, False
    return res.x * scale, norm * res.fun ** (1.0 / expo), bool(res.success) or res.nit < cfg.inner_max_iter


def solve_multistep(problem: NodeModel, config: SolverConfig | None = None, theta0=None):
    """Full inner minimisation (L-BFGS) between correspondence updates.

    Returns ``(theta, trace)``.
    """
    cfg = config or SolverConfig(method="multi_step", batch_size=51041)
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(getattr(problem, "theta0", None) if theta0 is None else theta0, dtype=float).reshape(-1)
    scale = problem.param_scale(cfg.param_unit)
    sizes = [len(ps) for ps in problem.pixel_sets]
    trace = SolveTrace()
    reassign = _Reassigner(problem, trace)
    it = 0
    t0 = time.perf_counter()
    done = False
    for epoch in range(cfg.epochs):
        batches = _epoch_batches(sizes, cfg.batch_size, rng)
        full_batch = len(batches) == 1
        for batch in batches:
            nodes = problem.project_nodes(theta, jacobian=True)
            changes = reassign(it, nodes, batch, full_batch)
            sub = None if full_batch else batch
            assign = [a.copy() for a in reassign.assign]
            J_start = cost(theta, assign, problem, batch=sub, nodes=nodes, gradient=False)[0]
            try:
                new_theta, J_end, inner_ok = _inner_lbfgs(theta, J_start, assign, problem, sub, scale, cfg)
            except (ArithmeticError, ValueError) as exc:
                raise SolverError(f"inner solver failed at iteration {it}: {exc}", trace) from exc
            if not J_end <= J_start:
                new_theta, J_end = theta, J_start
            step = float(np.linalg.norm((new_theta - theta) / scale))
            theta = new_theta
            trace.rows.append(TraceRow(it, epoch, J_end, changes, step, time.perf_counter() - t0))
            it += 1
            if changes == 0 and inner_ok:
                done = True
                break
        trace.epoch_costs.append(full_cost(theta, problem))
        if done:
            trace.converged, trace.reason = True, "correspondences unchanged"
            break
    else:
        trace.reason = "epoch budget exhausted"
    trace.theta = theta
    return theta, trace


def solve(problem: NodeModel, config: SolverConfig, theta0=None):
    if config.method == "one_step":
        return solve_onestep(problem, config, theta0)
    return solve_multistep(problem, config, theta0)
