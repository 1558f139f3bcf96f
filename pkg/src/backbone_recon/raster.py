"""Binary robot images: synthetic rendering, disk dilation, pixel extraction, PGM I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d

from .camera import CameraModel, project_points

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = (2448, 2048)
DEFAULT_DILATION_RADIUS = 15


class EmptyImageError(ValueError):
    pass


class PGMFormatError(ValueError):
    pass


@dataclass
class BinaryImage:
    """Boolean raster indexed ``bits[v, u]``; True is robot (white)."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("binary image must be two-dimensional")

    @classmethod
    def black(cls, width: int, height: int) -> BinaryImage:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def n_white(self) -> int:
        return int(self.bits.sum())


@dataclass
class PixelSet:
    view: int
    coords: np.ndarray  # (M, 2) float, columns (u, v)

    def __len__(self) -> int:
        return len(self.coords)


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def rasterize_points(cam: CameraModel, points: np.ndarray, image_size=None) -> tuple[BinaryImage, int]:
    """Render projected 3D points as single white pixels.

    Returns the image and the number of points skipped for falling outside
    the frame (or behind the camera).
    """
    w, h = image_size or cam.image_size
    uv, valid = project_points(cam, points)
    img = BinaryImage.black(w, h)
    iu = round_half_away(np.where(valid, uv[:, 0], -1.0))
    iv = round_half_away(np.where(valid, uv[:, 1], -1.0))
    inside = valid & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    skipped = int(np.sum(~inside))
    if not inside.any():
        raise EmptyImageError("every projected point falls outside the frame")
    img.bits[iv[inside], iu[inside]] = True
    if skipped:
        logger.info("skipped %d out-of-frame points", skipped)
    return img, skipped


def rasterize_curve(rig, points: np.ndarray, image_size=None) -> tuple[list[BinaryImage], list[int]]:
    """One pre-dilation image per camera; points should be < 1 px apart when projected."""
    images, skipped = [], []
    for cam in rig:
        img, n = rasterize_points(cam, points, image_size)
        images.append(img)
        skipped.append(n)
    return images, skipped


def disk_offsets(radius: int) -> np.ndarray:
    """Integer offsets ``(a, b)`` with ``a^2 + b^2 <= radius^2``."""
    r = int(radius)
    a, b = np.mgrid[-r:r + 1, -r:r + 1]
    keep = a * a + b * b <= r * r
    return np.column_stack([a[keep], b[keep]])


def dilate(img: BinaryImage, radius: int) -> BinaryImage:
    """Minkowski sum of the white set with the closed Euclidean disk of ``radius``.

    Decomposed into one horizontal run per disk row: for row offset ``a`` the
    disk spans ``|b| <= isqrt(r^2 - a^2)`` columns.
    """
    if radius < 0:
        raise ValueError("dilation radius must be non-negative")
    r = int(radius)
    if r == 0 or not img.bits.any():
        return BinaryImage(img.bits.copy())
    rows, cols = np.nonzero(img.bits)
    r0, r1 = max(rows.min() - r, 0), min(rows.max() + r + 1, img.height)
    c0, c1 = max(cols.min() - r, 0), min(cols.max() + r + 1, img.width)
    # pad so shifted reads never wrap
    src = np.zeros((r1 - r0 + 2 * r, c1 - c0 + 2 * r), dtype=bool)
    src[r:r + r1 - r0, r:r + c1 - c0] = img.bits[r0:r1, c0:c1]
    out = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for a in range(-r, r + 1):
        half = math.isqrt(r * r - a * a)
        band = src[r - a:r - a + r1 - r0]
        spread = maximum_filter1d(band.view(np.uint8), size=2 * half + 1, axis=1, mode="constant")
        out |= spread[:, r:r + c1 - c0].astype(bool)
    bits = img.bits.copy()
    bits[r0:r1, c0:c1] |= out
    return BinaryImage(bits)


def extract_pixels(img: BinaryImage, view: int = 0) -> PixelSet:
    """All white pixel centres in row-major order as ``(u, v)``."""
    v, u = np.nonzero(img.bits)
    if u.size == 0:
        raise EmptyImageError(f"view {view}: image contains no white pixels")
    return PixelSet(view, np.column_stack([u, v]).astype(float))


def render_views(rig, points: np.ndarray, radius: int = DEFAULT_DILATION_RADIUS, image_size=None):
    """Rasterise then dilate; returns the final images and per-view skip counts."""
    raw, skipped = rasterize_curve(rig, points, image_size)
    return [dilate(im, radius) for im in raw], skipped


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(img: BinaryImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    data = np.where(img.bits, 255, 0).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def _header_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> BinaryImage:
    """Read a binary (P5) PGM; values >= 128 are white."""
    data = Path(path).read_bytes()
    tokens, pos = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMFormatError(f"{path}: bad header") from exc
    if maxval != 255:
        raise PGMFormatError(f"{path}: expected maxval 255, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) - pos >= w * h else None
    if pixels is None:
        raise PGMFormatError(f"{path}: truncated pixel data")
    return BinaryImage(pixels.reshape(h, w) >= 128)
