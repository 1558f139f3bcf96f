import numpy as np

from backbone_recon.camera import CameraModel, Distortion, look_at


def make_camera(position, target=(0.0, 0.0, 95.0), focal=3000.0, dist=None, size=(2448, 2048)):
    R, t = look_at(position, target)
    w, h = size
    K = np.array([[focal, 0.0, (w - 1) / 2], [0.0, focal, (h - 1) / 2], [0.0, 0.0, 1.0]])
    return CameraModel(R, t, K, dist or Distortion(), size)


ACCEPTANCE: list[str] = []


def record(criterion: int, title: str, ok: bool, detail: str) -> None:
    """Print and keep one pass/fail line, then fail the test if needed."""
    line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line
