"""Pinhole camera with radial/tangential lens distortion.

Projection chain: rigid transform to the camera frame, division by depth,
lens distortion, then the intrinsic matrix. Also provides the inverse of the
distortion, two-view fundamental matrices and multi-view triangulation.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# distance (px) charged per pixel matched to a node behind a camera; the
# cost term is this distance to the power p, so 1e6 px^2 when p = 2
BEHIND_CAMERA_PENALTY_PX: float = 1000.0

ILL_CONDITIONED: float = 1e8

_DIST_KEYS = ("k1", "k2", "k3", "p1", "p2")


class BehindCameraError(ValueError):
    """A point has non-positive depth in the camera frame."""


class UndistortError(ArithmeticError):
    """Newton inversion of the lens distortion did not converge."""


class DegenerateGeometryError(ValueError):
    pass


class CalibrationFormatError(ValueError):
    pass


class IllConditionedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Distortion:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def is_zero(self) -> bool:
        return not any((self.k1, self.k2, self.k3, self.p1, self.p2))


@dataclass(frozen=True)
class CameraModel:
    """One calibrated view. ``X_cam = R @ X_world + t`` (mm), pixels ``= K @ [x_dist, 1]``."""

    R: np.ndarray
    t: np.ndarray
    K: np.ndarray
    dist: Distortion = field(default_factory=Distortion)
    image_size: tuple[int, int] = (2448, 2048)

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        K = np.array(self.K, dtype=float).reshape(3, 3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise CalibrationFormatError("camera rotation is not in SO(3)")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CalibrationFormatError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise CalibrationFormatError("intrinsic matrix must be upper triangular with K[2,2] = 1")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise CalibrationFormatError("image size must be positive")
        for arr in (R, t, K):
            arr.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def center(self) -> np.ndarray:
        """Optical centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def with_pose(self, R=None, t=None) -> CameraModel:
        return replace(self, R=self.R if R is None else R, t=self.t if t is None else t)


CameraRig = list[CameraModel]


def look_at(position, target, up=(0.0, 0.0, -1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of a camera at ``position`` looking at ``target``.

    Image rows grow along ``up`` projected onto the image plane, so the default
    puts world +z towards the top of the image.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    y = np.asarray(up, dtype=float) - np.dot(up, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return R, -R @ position


# ---------------------------------------------------------------------------
# projection chain
# ---------------------------------------------------------------------------


def distort(dist: Distortion, xn: np.ndarray) -> np.ndarray:
    """Apply lens distortion to normalised coordinates, shape (..., 2)."""
    xn = np.asarray(xn, dtype=float)
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    phi = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2
    xd = x * phi + dist.p1 * (2.0 * x * y) + 2.0 * dist.p2 * (r2 + 2.0 * x * x)
    yd = y * phi + 2.0 * dist.p1 * (r2 + 2.0 * y * y) + dist.p2 * (2.0 * x * y)
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(dist: Distortion, xn: np.ndarray) -> np.ndarray:
    """d(distorted)/d(normalised), shape (..., 2, 2)."""
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    phi = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2
    dphi = dist.k1 + 2.0 * dist.k2 * r2 + 3.0 * dist.k3 * r2 * r2
    p1, p2 = dist.p1, dist.p2
    J = np.empty(xn.shape[:-1] + (2, 2))
    J[..., 0, 0] = phi + 2.0 * x * x * dphi + 2.0 * p1 * y + 12.0 * p2 * x
    J[..., 0, 1] = 2.0 * x * y * dphi + 2.0 * p1 * x + 4.0 * p2 * y
    J[..., 1, 0] = 2.0 * x * y * dphi + 4.0 * p1 * x + 2.0 * p2 * y
    J[..., 1, 1] = phi + 2.0 * y * y * dphi + 12.0 * p1 * y + 2.0 * p2 * x
    return J


def to_pixels(cam: CameraModel, xd: np.ndarray) -> np.ndarray:
    K = cam.K
    u = K[0, 0] * xd[..., 0] + K[0, 1] * xd[..., 1] + K[0, 2]
    v = K[1, 1] * xd[..., 1] + K[1, 2]
    return np.stack([u, v], axis=-1)


def project_points(cam: CameraModel, X: np.ndarray, jacobian: bool = False):
    """Project world points ``X`` (n, 3) to pixels.

    Returns ``(uv, valid)`` or ``(uv, valid, J)`` with ``J`` of shape (n, 2, 3).
    Points with non-positive depth are marked invalid; their pixel values and
    Jacobians are NaN and zero respectively.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xc = X @ cam.R.T + cam.t
    Z = Xc[:, 2]
    valid = Z > 0
    Zs = np.where(valid, Z, 1.0)
    xn = Xc[:, :2] / Zs[:, None]
    xd = distort(cam.dist, xn)
    uv = to_pixels(cam, xd)
    uv[~valid] = np.nan
    if not jacobian:
        return uv, valid
    # d xn / d Xc
    dn = np.zeros((X.shape[0], 2, 3))
    dn[:, 0, 0] = 1.0 / Zs
    dn[:, 1, 1] = 1.0 / Zs
    dn[:, 0, 2] = -xn[:, 0] / Zs
    dn[:, 1, 2] = -xn[:, 1] / Zs
    J = cam.K[:2, :2] @ distort_jacobian(cam.dist, xn) @ dn @ cam.R
    J[~valid] = 0.0
    return uv, valid, J


def project(cam: CameraModel, X) -> np.ndarray:
    """Pixel coordinates of one world point; raises when it lies behind the camera."""
    uv, valid = project_points(cam, np.asarray(X, dtype=float).reshape(1, 3))
    if not valid[0]:
        raise BehindCameraError(f"point {np.asarray(X).tolist()} is behind the camera")
    return uv[0]


def project_jacobian(cam: CameraModel, X) -> np.ndarray:
    _, valid, J = project_points(cam, np.asarray(X, dtype=float).reshape(1, 3), jacobian=True)
    if not valid[0]:
        raise BehindCameraError(f"point {np.asarray(X).tolist()} is behind the camera")
    return J[0]


def undistort_points(cam: CameraModel, pixels, max_iter: int = 100, tol_px: float = 1e-9) -> np.ndarray:
    """Normalised coordinates whose distorted projection reproduces ``pixels``.

    Newton iteration on the 2D distortion residual, started from ``K^-1 pixel``.
    The pixel-space round-trip residual is checked for every point.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    w, h = cam.image_size
    if np.any((px < -0.5) | (px > np.array([w, h]) - 0.5)):
        logger.warning("undistorting %d pixels outside the image bounds",
                       int(np.sum(np.any((px < -0.5) | (px > np.array([w, h]) - 0.5), axis=1))))
    hom = np.column_stack([px, np.ones(len(px))]) @ cam.K_inv.T
    target = hom[:, :2]
    if cam.dist.is_zero:
        return target
    x = target.copy()
    for _ in range(max_iter):
        r = distort(cam.dist, x) - target
        step = np.linalg.solve(distort_jacobian(cam.dist, x), r[..., None])[..., 0]
        x = x - step
        if np.max(np.abs(step), initial=0.0) < 1e-16:
            break
    resid = np.linalg.norm(to_pixels(cam, distort(cam.dist, x)) - px, axis=1)
    bad = ~(resid <= tol_px)
    if np.any(bad):
        i = int(np.argmax(np.where(bad, resid, -1)))
        raise UndistortError(
            f"distortion inversion failed for pixel {px[i].tolist()} (residual {resid[i]:.3g} px)")
    return x


def undistort_to_pixels(cam: CameraModel, pixels) -> np.ndarray:
    """Pixel coordinates with the lens distortion removed (ideal pinhole pixels)."""
    xn = undistort_points(cam, pixels)
    return to_pixels(cam, xn)


# ---------------------------------------------------------------------------
# two-view geometry
# ---------------------------------------------------------------------------


def skew(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def relative_pose(left: CameraModel, right: CameraModel):
    """``(R, t)`` with ``X_right = R X_left + t``."""
    R = right.R @ left.R.T
    return R, right.t - R @ left.t


def essential_matrix(left: CameraModel, right: CameraModel) -> np.ndarray:
    R, t = relative_pose(left, right)
    scale = max(np.linalg.norm(left.center), np.linalg.norm(right.center), 1.0)
    if np.linalg.norm(t) <= 1e-12 * scale:
        raise DegenerateGeometryError("cameras share the same optical centre")
    return skew(t) @ R


def fundamental_matrix(left: CameraModel, right: CameraModel) -> np.ndarray:
    """Pixel-space fundamental matrix with ``x_R^T F x_L = 0``, scaled to unit Frobenius norm."""
    F = right.K_inv.T @ essential_matrix(left, right) @ left.K_inv
    return F / np.linalg.norm(F)


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------


@dataclass
class Triangulation:
    point: np.ndarray
    residual_px: float
    condition: float
    ill_conditioned: bool


def _dlt_rows(cam: CameraModel, xn: np.ndarray) -> np.ndarray:
    P = np.column_stack([cam.R, cam.t])
    return np.stack([xn[0] * P[2] - P[0], xn[1] * P[2] - P[1]])


def triangulate(rig, pixels, undistort: bool = True) -> Triangulation:
    """Triangulate one point from its pixel coordinates in two or more views.

    Linear least squares on the normalised projection relations, then one
    Gauss-Newton pass on the full (distorting) reprojection error.
    """
    pixels = [np.asarray(p, dtype=float).reshape(2) for p in pixels]
    if len(rig) < 2 or len(pixels) != len(rig):
        raise ValueError("triangulation needs one pixel per camera and at least two cameras")
    if undistort:
        xns = [undistort_points(c, p)[0] for c, p in zip(rig, pixels)]
    else:
        xns = [(c.K_inv @ np.append(p, 1.0))[:2] for c, p in zip(rig, pixels)]
    A = np.vstack([_dlt_rows(c, xn) for c, xn in zip(rig, xns)])
    M, b = A[:, :3], -A[:, 3]
    cond = float(np.linalg.cond(M))
    X = np.linalg.lstsq(M, b, rcond=None)[0]
    ill = not np.isfinite(cond) or cond > ILL_CONDITIONED

    def residuals(X):
        r, J = [], []
        for cam, px in zip(rig, pixels):
            uv, valid, jac = project_points(cam, X[None], jacobian=True)
            if not valid[0]:
                return None, None
            r.append(uv[0] - px)
            J.append(jac[0])
        return np.concatenate(r), np.vstack(J)

    r, J = residuals(X)
    if r is not None and undistort and not ill:
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        r_new, _ = residuals(X + step)
        if r_new is not None and np.linalg.norm(r_new) <= np.linalg.norm(r):
            X, r = X + step, r_new
    resid = float(np.sqrt(np.mean(r.reshape(-1, 2) ** 2) * 2)) if r is not None else float("inf")
    if ill:
        warnings.warn(f"near-parallel viewing rays (condition {cond:.3g})", IllConditionedWarning,
                      stacklevel=2)
    return Triangulation(X, resid, cond, ill)


# ---------------------------------------------------------------------------
# calibration file
# ---------------------------------------------------------------------------

_CAMERA_KEYS = {"R", "t", "K", "dist", "image_size"}


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "R": cam.R.tolist(),
        "t": cam.t.tolist(),
        "K": cam.K.tolist(),
        "dist": {k: float(getattr(cam.dist, k)) for k in _DIST_KEYS},
        "image_size": list(cam.image_size),
    }


def camera_from_dict(d: dict) -> CameraModel:
    if not isinstance(d, dict):
        raise CalibrationFormatError("camera entry must be an object")
    extra = set(d) - _CAMERA_KEYS
    missing = {"R", "t", "K", "image_size"} - set(d)
    if extra:
        raise CalibrationFormatError(f"unknown camera keys: {sorted(extra)}")
    if missing:
        raise CalibrationFormatError(f"missing camera keys: {sorted(missing)}")
    dist = d.get("dist", {})
    if set(dist) - set(_DIST_KEYS):
        raise CalibrationFormatError(f"unknown distortion keys: {sorted(set(dist) - set(_DIST_KEYS))}")
    try:
        return CameraModel(
            R=np.array(d["R"], dtype=float),
            t=np.array(d["t"], dtype=float),
            K=np.array(d["K"], dtype=float),
            dist=Distortion(**{k: float(v) for k, v in dist.items()}),
            image_size=tuple(int(v) for v in d["image_size"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CalibrationFormatError):
            raise
        raise CalibrationFormatError(f"malformed camera entry: {exc}") from exc


def rig_to_dict(rig) -> dict:
    return {"cameras": [camera_to_dict(c) for c in rig]}


def rig_from_dict(d: dict) -> list[CameraModel]:
    if not isinstance(d, dict) or set(d) != {"cameras"}:
        raise CalibrationFormatError('calibration must be an object with exactly one key "cameras"')
    cams = [camera_from_dict(c) for c in d["cameras"]]
    if not cams:
        raise CalibrationFormatError("calibration lists no cameras")
    return cams


def load_calibration(path) -> list[CameraModel]:
    with open(Path(path), encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CalibrationFormatError(f"{path}: {exc}") from exc
    return rig_from_dict(data)


def save_calibration(rig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n", encoding="utf-8")
