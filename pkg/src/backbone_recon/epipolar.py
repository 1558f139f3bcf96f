"""Warm start from stereo: skeletons, epipolar matching, triangulation, curve fit."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from skimage.morphology import binary_opening, disk
from skimage.morphology import skeletonize as _thin

from .camera import fundamental_matrix, triangulate, undistort_to_pixels
from .curve import CurveParams, SegmentGrid, integrate_frame, param_scale
from .raster import BinaryImage, EmptyImageError

logger = logging.getLogger(__name__)

DEFAULT_TAU = 1.5
DEFAULT_WINDOW = 50
MIN_PAIRS = 8

_NEIGHBOURS = [(du, dv) for du in (-1, 0, 1) for dv in (-1, 0, 1) if du or dv]


class SegmentationError(ValueError):
    pass


class CorrespondenceError(ValueError):
    pass


class MonotonicityError(CorrespondenceError):
    pass


class WarmStartError(ValueError):
    pass


class WarmStartQualityWarning(UserWarning):
    pass


@dataclass
class Skeleton:
    view: int
    pixels: np.ndarray  # (K, 2) int, columns (u, v); base-to-tip once ordered
    ordered: bool = False

    def __len__(self) -> int:
        return len(self.pixels)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["order", "u", "v"])
            for k, (u, v) in enumerate(self.pixels):
                w.writerow([k, int(u), int(v)])


def skeletonize(img: BinaryImage, view: int = 0, opening_radius: int = 0,
                max_secondary_fraction: float = 0.1) -> Skeleton:
    """Thin the dominant white component to a one-pixel-wide, 8-connected skeleton.

    With ``opening_radius > 0`` an opening by a disk of that radius removes
    speckle first. Components smaller than ``max_secondary_fraction`` of the
    largest are discarded; a larger second component is an error.
    """
    bits = img.bits
    if not bits.any():
        raise EmptyImageError(f"view {view}: image contains no white pixels")
    if opening_radius > 0:
        bits = binary_opening(bits, disk(opening_radius))
    labels, n = ndimage.label(bits, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        raise SegmentationError(f"view {view}: nothing left after noise filtering")
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(sizes)[::-1]
    if n > 1 and sizes[order[1]] >= max_secondary_fraction * sizes[order[0]]:
        raise SegmentationError(f"view {view}: several large components, sizes {sorted(sizes.tolist(), reverse=True)[:5]}")
    main = labels == order[0] + 1
    rows, cols = np.nonzero(main)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    # pad by one so the thinning never touches the crop border
    crop = np.pad(main[r0:r1, c0:c1], 1)
    thin = _thin(crop, method="zhang")
    v, u = np.nonzero(thin)
    return Skeleton(view, np.column_stack([u + c0 - 1, v + r0 - 1]).astype(np.int64))


def _pixel_graph(pixels: np.ndarray) -> nx.Graph:
    g = nx.Graph()
    keys = [tuple(int(x) for x in p) for p in pixels]
    present = set(keys)
    g.add_nodes_from(keys)
    for u, v in keys:
        for du, dv in _NEIGHBOURS:
            q = (u + du, v + dv)
            if q in present:
                g.add_edge((u, v), q, weight=math.hypot(du, dv))
    return g


def order_path(skeleton: Skeleton, base_hint) -> Skeleton:
    """Longest path through the skeleton graph starting at the endpoint nearest ``base_hint``.

    Cycles are broken by repeatedly deleting the shortest edge of a found cycle.
    """
    if len(skeleton) == 0:
        raise EmptyImageError("empty skeleton")
    g = _pixel_graph(skeleton.pixels)
    comps = list(nx.connected_components(g))
    if len(comps) > 1:
        raise SegmentationError(f"view {skeleton.view}: skeleton is disconnected, component sizes "
                                f"{sorted((len(c) for c in comps), reverse=True)}")
    while True:
        try:
            cycle = nx.find_cycle(g)
        except nx.NetworkXNoCycle:
            break
        a, b = min(cycle, key=lambda e: g.edges[e]["weight"])
        g.remove_edge(a, b)
    if g.number_of_nodes() == 1:
        return Skeleton(skeleton.view, skeleton.pixels.copy(), True)
    ends = sorted(n for n, d in g.degree() if d == 1)
    hint = np.asarray(base_hint, dtype=float)
    start = min(ends, key=lambda n: (np.hypot(n[0] - hint[0], n[1] - hint[1]), n))
    dist, paths = nx.single_source_dijkstra(g, start)
    far = max(dist, key=lambda n: (dist[n], n))
    return Skeleton(skeleton.view, np.array(paths[far], dtype=np.int64), True)


@dataclass
class Correspondences:
    left_index: np.ndarray
    right_index: np.ndarray
    left_pixels: np.ndarray  # (K, 2) as observed (distorted)
    right_pixels: np.ndarray
    skipped: int = 0
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.left_index)


def correspond_epipolar(left: Skeleton, right: Skeleton, rig, tau: float = DEFAULT_TAU,
                        window: int = DEFAULT_WINDOW, min_pairs: int = MIN_PAIRS) -> Correspondences:
    """Walk the left path and match each pixel to the right path along its epipolar line.

    A candidate lies within ``tau`` pixels of the line and at most ``window``
    path indices ahead of the previous match (never behind it). Of the first
    contiguous run of admissible candidates the one closest to the line wins.
    """
    if not (left.ordered and right.ordered):
        raise ValueError("skeletons must be ordered base-to-tip")
    cam_l, cam_r = rig[0], rig[1]
    xl = undistort_to_pixels(cam_l, left.pixels.astype(float))
    xr = undistort_to_pixels(cam_r, right.pixels.astype(float))
    F = fundamental_matrix(cam_l, cam_r)
    lines = np.column_stack([xl, np.ones(len(xl))]) @ F.T
    hr = np.column_stack([xr, np.ones(len(xr))])
    li, ri = [], []
    prev = 0
    skipped = rejected = 0
    for i, line in enumerate(lines):
        d = np.abs(hr @ line) / math.hypot(line[0], line[1])
        cand = np.flatnonzero(d <= tau)
        if cand.size == 0:
            skipped += 1
            continue
        ok = cand[(cand >= prev) & (cand <= prev + window)]
        if ok.size == 0:
            rejected += 1
            skipped += 1
            continue
        run_end = np.flatnonzero(np.diff(ok) > 1)
        run = ok[: run_end[0] + 1] if run_end.size else ok
        j = int(run[np.argmin(d[run])])
        li.append(i)
        ri.append(j)
        prev = j
    if rejected > len(li):
        raise MonotonicityError(f"{rejected} left pixels only meet the right path behind the previous "
                                f"match ({len(li)} matched); is one path reversed?")
    if len(li) < min_pairs:
        raise CorrespondenceError(f"only {len(li)} epipolar matches (need {min_pairs})")
    li = np.array(li, dtype=np.int64)
    ri = np.array(ri, dtype=np.int64)
    return Correspondences(li, ri, left.pixels[li].astype(float), right.pixels[ri].astype(float),
                           skipped, rejected)


@dataclass
class WarmStartPoints:
    arc_lengths: np.ndarray
    points: np.ndarray

    def __post_init__(self) -> None:
        self.arc_lengths = np.asarray(self.arc_lengths, dtype=float).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.arc_lengths) != len(self.points) or len(self.points) == 0:
            raise WarmStartError("warm-start points and arc lengths must be non-empty and aligned")

    @classmethod
    def from_points(cls, points, min_spacing_mm: float = 0.0) -> WarmStartPoints:
        """Cumulative chord lengths after dropping points closer than ``min_spacing_mm`` to the last kept one."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        keep = [0]
        for k in range(1, len(pts)):
            gap = np.linalg.norm(pts[k] - pts[keep[-1]])
            if gap > 0 and gap >= min_spacing_mm:
                keep.append(k)
        pts = pts[keep]
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return cls(np.concatenate([[0.0], np.cumsum(chords)]), pts)

    def write_csv(self, path) -> None:
        from .curve import write_samples_csv

        write_samples_csv(path, self.arc_lengths, self.points)

    @classmethod
    def read_csv(cls, path) -> WarmStartPoints:
        from .curve import read_samples_csv

        s, pts = read_samples_csv(path)
        return cls(s, pts)


def build_warmstart(pairs: Correspondences, rig, base_position=None,
                    min_spacing_mm: float = 2.0) -> WarmStartPoints:
    """Triangulate matched pairs and accumulate chord lengths from the base.

    Without ``base_position`` the points are shifted so the first one is the
    origin; with it, the base point is prepended to the triangulated points.
    """
    if len(pairs) < MIN_PAIRS:
        raise CorrespondenceError(f"need at least {MIN_PAIRS} pairs, got {len(pairs)}")
    rig2 = [rig[0], rig[1]]
    pts = np.array([triangulate(rig2, [a, b]).point for a, b in zip(pairs.left_pixels, pairs.right_pixels)])
    if base_position is None:
        pts = pts - pts[0]
    else:
        pts = np.vstack([np.asarray(base_position, dtype=float)[None], pts])
    return WarmStartPoints.from_points(pts, min_spacing_mm)


@dataclass
class InitialGuess:
    theta: np.ndarray
    rms_mm: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def fit_initial_guess(ws: WarmStartPoints, grid: SegmentGrid, base_position=None, base_orientation=None,
                      max_iter: int = 500, warn_rms_mm: float = 5.0, theta0=None) -> InitialGuess:
    """Least-squares curve parameters for points with known arc lengths.

    ``history`` holds the cost at every accepted iterate (non-increasing).
    """
    L = grid.length
    if ws.arc_lengths[-1] > 1.05 * L:
        raise WarmStartError(f"warm-start arc length {ws.arc_lengths[-1]:.2f} mm exceeds 1.05 L = {1.05 * L:.2f} mm")
    s = np.minimum(ws.arc_lengths, L)
    base_p = np.zeros(3) if base_position is None else np.asarray(base_position, dtype=float)
    base_R = np.eye(3) if base_orientation is None else np.asarray(base_orientation, dtype=float)
    scale = param_scale(grid, None)
    shape = (grid.n_segments, 2, 4)
    history: list[float] = []

    def params(z):
        return CurveParams((z * scale).reshape(shape), base_p, base_R)

    def resid(z):
        return (integrate_frame(params(z), grid, s).points - ws.points).ravel()

    def jac(z):
        smp = integrate_frame(params(z), grid, s, sensitivities=True)
        r = (smp.points - ws.points).ravel()
        history.append(0.5 * float(r @ r))
        return smp.sensitivities.reshape(-1, grid.n_params) * scale

    z0 = np.zeros(grid.n_params) if theta0 is None else np.asarray(theta0, dtype=float).reshape(-1) / scale
    res = least_squares(resid, z0, jac=jac, method="trf", max_nfev=max_iter, xtol=1e-12, ftol=1e-14, gtol=1e-12)
    rms = float(np.sqrt(np.mean(np.sum(res.fun.reshape(-1, 3) ** 2, axis=1))))
    if rms > warn_rms_mm:
        warnings.warn(f"warm-start fit RMS residual {rms:.3f} mm exceeds {warn_rms_mm} mm",
                      WarmStartQualityWarning, stacklevel=2)
    return InitialGuess(res.x * scale, rms, history, int(res.nfev))


@dataclass
class WarmStart:
    theta: np.ndarray
    points: WarmStartPoints
    skeletons: list[Skeleton]
    pairs: Correspondences
    fit: InitialGuess


def warmstart_from_images(images, rig, base_hints, grid: SegmentGrid, base_position=None,
                          base_orientation=None, tau: float = DEFAULT_TAU, window: int = DEFAULT_WINDOW,
                          opening_radius: int = 0, min_spacing_mm: float = 2.0) -> WarmStart:
    """Full pipeline on the first two views."""
    if len(images) < 2:
        raise ValueError("the epipolar warm start needs two views")
    skels = [order_path(skeletonize(images[v], v, opening_radius), base_hints[v]) for v in (0, 1)]
    pairs = correspond_epipolar(skels[0], skels[1], rig, tau, window)
    logger.info("epipolar matching: %d pairs, %d left pixels skipped", len(pairs), pairs.skipped)
    ws = build_warmstart(pairs, rig, base_position, min_spacing_mm)
    fit = fit_initial_guess(ws, grid, base_position, base_orientation)
    logger.info("warm-start fit: RMS %.3f mm over %d points", fit.rms_mm, len(ws.points))
    return WarmStart(fit.theta, ws, skels, pairs, fit)


def save_warmstart_theta(path, theta) -> None:
    Path(path).write_text(" ".join(f"{x:.17g}" for x in np.ravel(theta)) + "\n", encoding="utf-8")
