import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backbone_recon.camera import (BehindCameraError, CalibrationFormatError, CameraModel, DegenerateGeometryError,
                                   Distortion, IllConditionedWarning, distort, distort_jacobian,
                                   fundamental_matrix, load_calibration, project, project_jacobian,
                                   project_points, save_calibration, to_pixels, triangulate,
                                   undistort_points, undistort_to_pixels)

from helpers import make_camera


def simple_camera(dist=None):
    K = np.array([[100.0, 0.0, 320.0], [0.0, 100.0, 240.0], [0.0, 0.0, 1.0]])
    return CameraModel(np.eye(3), np.zeros(3), K, dist or Distortion(), (640, 480))


def test_pinhole_projection_by_hand():
    # (1, 2, 2) -> normalised (0.5, 1.0) -> pixels (320 + 50, 240 + 100)
    np.testing.assert_allclose(project(simple_camera(), [1.0, 2.0, 2.0]), [370.0, 340.0])


def test_radial_distortion_by_hand():
    # r^2 = 0.01, factor 1 + 0.1 * 0.01
    np.testing.assert_allclose(distort(Distortion(k1=0.1), np.array([0.1, 0.0])), [0.1001, 0.0], rtol=0, atol=1e-15)


def test_tangential_terms_by_hand():
    x, y = 0.2, -0.1
    r2 = x * x + y * y
    got = distort(Distortion(p1=0.01, p2=0.02), np.array([x, y]))
    expected = [x + 0.01 * 2 * x * y + 2 * 0.02 * (r2 + 2 * x * x), y + 2 * 0.01 * (r2 + 2 * y * y) + 0.02 * 2 * x * y]
    np.testing.assert_allclose(got, expected, atol=1e-15)


def test_axis_jacobian_of_identity_camera():
    cam = CameraModel(np.eye(3), np.zeros(3), np.eye(3), Distortion(), (10, 10))
    np.testing.assert_allclose(project_jacobian(cam, [0.0, 0.0, 1.0]), [[1, 0, 0], [0, 1, 0]], atol=1e-15)


def test_projection_jacobian_matches_finite_differences(stereo_rig):
    rng = np.random.default_rng(0)
    X = rng.uniform(-60, 60, (50, 3)) + [0, 0, 95]
    for cam in stereo_rig:
        _, _, J = project_points(cam, X, jacobian=True)
        h = 1e-5
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            fd = (project_points(cam, X + d)[0] - project_points(cam, X - d)[0]) / (2 * h)
            np.testing.assert_allclose(J[:, :, k], fd, rtol=1e-6, atol=1e-6)


def test_distortion_jacobian_matches_finite_differences():
    dist = Distortion(-0.2, 0.05, 0.01, 1e-3, -2e-3)
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (100, 2))
    J = distort_jacobian(dist, x)
    h = 1e-7
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        fd = (distort(dist, x + d) - distort(dist, x - d)) / (2 * h)
        np.testing.assert_allclose(J[:, :, k], fd, atol=1e-7)


def test_behind_camera():
    cam = simple_camera()
    with pytest.raises(BehindCameraError):
        project(cam, [0.0, 0.0, -1.0])
    uv, valid, J = project_points(cam, np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]), jacobian=True)
    assert valid.tolist() == [False, True]
    assert np.isnan(uv[0]).all() and not J[0].any()


def test_undistort_round_trip_within_half_unit_radius(stereo_rig):
    cam = stereo_rig[0]
    rng = np.random.default_rng(2)
    r = 0.5 * np.sqrt(rng.uniform(0, 1, 10_000))
    a = rng.uniform(0, 2 * np.pi, 10_000)
    xn = np.column_stack([r * np.cos(a), r * np.sin(a)])
    pixels = to_pixels(cam, distort(cam.dist, xn))
    back = undistort_points(cam, pixels)
    assert np.abs(to_pixels(cam, distort(cam.dist, back)) - pixels).max() <= 1e-9
    assert np.abs(back - xn).max() * cam.K[0, 0] <= 1e-9


def test_zero_distortion_undistort_is_identity():
    cam = simple_camera()
    px = np.array([[10.0, 20.0], [320.0, 240.0]])
    np.testing.assert_allclose(undistort_to_pixels(cam, px), px, atol=1e-12)


def test_epipolar_constraint_on_synthetic_correspondences(stereo_rig):
    left, right = stereo_rig
    F = fundamental_matrix(left, right)
    assert abs(np.linalg.norm(F) - 1) < 1e-12 and abs(np.linalg.det(F)) < 1e-12
    X = np.random.default_rng(3).uniform(-80, 80, (500, 3)) + [0, 0, 95]
    xl = undistort_to_pixels(left, project_points(left, X)[0])
    xr = undistort_to_pixels(right, project_points(right, X)[0])
    resid = np.einsum("ni,ij,nj->n", np.column_stack([xr, np.ones(500)]), F, np.column_stack([xl, np.ones(500)]))
    assert np.abs(resid).max() <= 1e-9


def test_rectified_pair_has_horizontal_epipolar_lines():
    K = np.array([[500.0, 0, 320], [0, 500.0, 240], [0, 0, 1]])
    left = CameraModel(np.eye(3), np.zeros(3), K, Distortion(), (640, 480))
    right = CameraModel(np.eye(3), np.array([-100.0, 0, 0]), K, Distortion(), (640, 480))
    line = fundamental_matrix(left, right) @ np.array([100.0, 200.0, 1.0])
    # the line a u + b v + c = 0 must be v = 200
    assert abs(line[0]) < 1e-15 and abs(line[2] / line[1] + 200.0) < 1e-9


def test_identical_centres_are_degenerate():
    cam = simple_camera()
    with pytest.raises(DegenerateGeometryError):
        fundamental_matrix(cam, cam)


def test_triangulation_inverse_crime(stereo_rig):
    X = np.random.default_rng(4).uniform(-80, 80, (200, 3)) + [0, 0, 95]
    worst = 0.0
    for p in X:
        px = [project(c, p) for c in stereo_rig]
        worst = max(worst, np.linalg.norm(triangulate(stereo_rig, px).point - p))
    assert worst <= 1e-6


def test_triangulation_flags_near_parallel_rays():
    a = make_camera((560.0, 0.0, 95.0))
    b = make_camera((560.0, 1e-7, 95.0))
    p = np.array([0.0, 0.0, 95.0])
    with pytest.warns(IllConditionedWarning):
        res = triangulate([a, b], [project(a, p), project(b, p)])
    assert res.ill_conditioned


def test_calibration_round_trip_and_rejection(tmp_path, stereo_rig):
    path = tmp_path / "calib.json"
    save_calibration(stereo_rig, path)
    rig = load_calibration(path)
    for a, b in zip(rig, stereo_rig):
        assert np.array_equal(a.R, b.R) and np.array_equal(a.K, b.K) and a.dist == b.dist
    data = json.loads(path.read_text())
    data["cameras"][0]["gain"] = 2
    path.write_text(json.dumps(data))
    with pytest.raises(CalibrationFormatError):
        load_calibration(path)
    data["cameras"][0].pop("gain")
    data["cameras"][0]["dist"]["k4"] = 0.0
    path.write_text(json.dumps(data))
    with pytest.raises(CalibrationFormatError):
        load_calibration(path)
    data["cameras"][0]["dist"].pop("k4")
    data["cameras"][0]["R"] = [[2, 0, 0], [0, 1, 0], [0, 0, 1]]
    path.write_text(json.dumps(data))
    with pytest.raises(CalibrationFormatError):
        load_calibration(path)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-0.3, 0.3), st.floats(-0.1, 0.1))
def test_undistort_inverts_distort_property(x, y, k1, k2):
    cam = simple_camera(Distortion(k1=k1, k2=k2, p1=1e-3, p2=-1e-3))
    px = to_pixels(cam, distort(cam.dist, np.array([[x, y]])))
    jac = distort_jacobian(cam.dist, np.array([x, y]))
    if np.linalg.det(jac) < 0.2:
        return  # distortion folds over here; not invertible
    back = undistort_points(cam, px)
    np.testing.assert_allclose(back[0], [x, y], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 4.0))
def test_scaling_pixels_and_intrinsics_commutes(factor):
    # scaling focal lengths and principal point scales all pixel coordinates
    cam = simple_camera(Distortion(k1=0.05))
    K2 = cam.K.copy()
    K2[:2] *= factor
    cam2 = CameraModel(cam.R, cam.t, K2, cam.dist, cam.image_size)
    X = np.array([[0.3, -0.2, 2.0], [1.0, 0.5, 3.0]])
    np.testing.assert_allclose(project_points(cam2, X)[0], factor * project_points(cam, X)[0], rtol=1e-12)


def test_triangulation_with_half_pixel_noise(scenario):
    rng = np.random.default_rng(12)
    X = scenario.truth_samples(300)
    errors = []
    for x in X:
        px = [project(c, x) + rng.uniform(-0.5, 0.5, 2) for c in scenario.rig]
        errors.append(np.linalg.norm(triangulate(scenario.rig, px).point - x))
    errors = np.array(errors)
    assert np.median(errors) <= 0.5 and np.percentile(errors, 95) <= 1.0
