import numpy as np
import pytest
from scipy.spatial import cKDTree

from backbone_recon.camera import project_points
from backbone_recon.curve import CurveParams, SegmentGrid, integrate_frame
from backbone_recon.epipolar import (CorrespondenceError, MonotonicityError, Skeleton, WarmStartError,
                                     WarmStartPoints, build_warmstart, correspond_epipolar, fit_initial_guess,
                                     order_path, skeletonize, warmstart_from_images)
from backbone_recon.raster import BinaryImage, EmptyImageError, dilate, rasterize_curve


def image_from(pixels, w=40, h=40):
    img = BinaryImage.black(w, h)
    for u, v in pixels:
        img.bits[v, u] = True
    return img


def assert_path(sk):
    steps = np.abs(np.diff(sk.pixels, axis=0))
    assert steps.max() <= 1 and (steps.sum(axis=1) > 0).all()
    assert len({tuple(p) for p in sk.pixels}) == len(sk)


def test_thick_bar_thins_to_its_centre_row():
    img = BinaryImage.black(30, 11)
    img.bits[3:8, 2:28] = True
    sk = skeletonize(img)
    assert np.abs(sk.pixels[:, 1] - 5).max() <= 1
    inner = sk.pixels[(sk.pixels[:, 0] > 6) & (sk.pixels[:, 0] < 23)]
    assert len(inner) == 16 and set(inner[:, 1].tolist()) == {5}
    ordered = order_path(sk, (0, 5))
    assert_path(ordered)
    assert ordered.pixels[0, 0] < ordered.pixels[-1, 0]


def test_empty_image_is_rejected():
    with pytest.raises(EmptyImageError):
        skeletonize(BinaryImage.black(10, 10))


def test_y_shape_keeps_the_long_branch():
    stem = [(5, v) for v in range(5, 30)]
    long_arm = [(5 + k, 29 + k) for k in range(1, 8)]
    spur = [(5 - k, 29 + k) for k in range(1, 3)]
    sk = Skeleton(0, np.array(stem + long_arm + spur))
    out = order_path(sk, (5, 0))
    assert tuple(out.pixels[0]) == (5, 5)
    assert tuple(out.pixels[-1]) == (12, 36)
    assert_path(out)


def test_c_shape_ordering_from_hint():
    pts = [(u, 5) for u in range(5, 25)] + [(24, v) for v in range(6, 25)] + [(u, 24) for u in range(23, 4, -1)]
    out = order_path(Skeleton(0, np.array(pts[::-1])), (5, 4))
    assert tuple(out.pixels[0]) == (5, 5) and tuple(out.pixels[-1]) == (5, 24)
    # the two corners are cut diagonally
    assert len(out) == len(pts) - 2
    assert_path(out)


def test_small_loop_is_broken_into_a_path():
    ring = [(10, 10), (11, 10), (11, 11), (10, 11)]
    tail = [(12, 12), (13, 13), (14, 14)]
    out = order_path(Skeleton(0, np.array(ring + tail)), (9, 9))
    assert_path(out)
    assert tuple(out.pixels[-1]) == (14, 14)


def test_disconnected_skeleton_is_rejected():
    from backbone_recon.epipolar import SegmentationError

    with pytest.raises(SegmentationError):
        order_path(Skeleton(0, np.array([(0, 0), (1, 1), (5, 5), (6, 6)])), (0, 0))


def _stereo_paths(rig, points):
    out = []
    for cam in rig:
        uv, _ = project_points(cam, points)
        px = np.rint(uv).astype(np.int64)
        keep = np.concatenate([[True], (np.diff(px, axis=0) != 0).any(axis=1)])
        out.append(Skeleton(len(out), px[keep], True))
    return out


def test_reversed_right_path_is_detected(stereo_rig):
    s = np.linspace(0, 1, 400)
    pts = np.column_stack([20 * np.sin(3 * s), 15 * s, 60 + 60 * s])
    left, right = _stereo_paths(stereo_rig, pts)
    pairs = correspond_epipolar(left, right, stereo_rig)
    assert len(pairs) > 50 and np.all(np.diff(pairs.right_index) >= 0)
    rev = Skeleton(1, right.pixels[::-1].copy(), True)
    with pytest.raises(MonotonicityError):
        correspond_epipolar(left, rev, stereo_rig)


def test_unordered_skeletons_are_refused(stereo_rig):
    sk = Skeleton(0, np.zeros((3, 2), dtype=np.int64))
    with pytest.raises(ValueError):
        correspond_epipolar(sk, sk, stereo_rig)


def test_too_few_pairs(stereo_rig):
    pts = np.column_stack([np.zeros(3), np.zeros(3), [90.0, 95.0, 100.0]])
    left, right = _stereo_paths(stereo_rig, pts)
    with pytest.raises(CorrespondenceError):
        correspond_epipolar(left, right, stereo_rig)


def test_chord_lengths_and_duplicate_points():
    pts = [[0, 0, 0], [3, 4, 0], [3, 4, 0], [3, 4, 12]]
    ws = WarmStartPoints.from_points(pts)
    np.testing.assert_array_equal(ws.arc_lengths, [0, 5, 17])
    sparse = WarmStartPoints.from_points([[0, 0, 0], [1, 0, 0], [2.5, 0, 0], [3, 0, 0]], min_spacing_mm=2.0)
    np.testing.assert_array_equal(sparse.arc_lengths, [0, 2.5])


def test_quarter_circle_chords_underestimate_arc_length():
    t = np.linspace(0, np.pi / 2, 200)
    pts = np.column_stack([10 * (1 - np.cos(t)), np.zeros_like(t), 10 * np.sin(t)])
    ws = WarmStartPoints.from_points(pts)
    exact = 5 * np.pi
    assert ws.arc_lengths[-1] < exact
    assert exact - ws.arc_lengths[-1] < 1e-4


def test_warmstart_points_csv(tmp_path):
    ws = WarmStartPoints.from_points(np.random.default_rng(0).normal(size=(7, 3)))
    ws.write_csv(tmp_path / "w.csv")
    back = WarmStartPoints.read_csv(tmp_path / "w.csv")
    np.testing.assert_array_equal(back.points, ws.points)
    np.testing.assert_array_equal(back.arc_lengths, ws.arc_lengths)


def test_fit_recovers_parameters_from_exact_samples():
    grid = SegmentGrid([0.0, 40.0, 90.0])
    rng = np.random.default_rng(5)
    truth = CurveParams(rng.normal(0, 0.004, (2, 2, 4)) * np.array([1, 0.01, 1, 0.01]))
    s = np.linspace(0, 90, 60)
    pts = integrate_frame(truth, grid, s).points
    fit = fit_initial_guess(WarmStartPoints(s, pts), grid)
    assert fit.rms_mm < 1e-6
    assert all(b <= a * (1 + 1e-12) + 1e-30 for a, b in zip(fit.history, fit.history[1:]))


def test_straight_line_gives_zero_curvature():
    grid = SegmentGrid([0.0, 50.0, 100.0])
    s = np.linspace(0, 100, 30)
    pts = np.column_stack([np.zeros(30), np.zeros(30), s])
    fit = fit_initial_guess(WarmStartPoints(s, pts), grid)
    assert fit.rms_mm < 1e-9 and np.abs(fit.theta).max() < 1e-9


def test_fit_rejects_overlong_points():
    grid = SegmentGrid([0.0, 10.0])
    with pytest.raises(WarmStartError):
        fit_initial_guess(WarmStartPoints([0, 11], [[0, 0, 0], [0, 0, 11]]), grid)


def test_skeleton_stays_near_the_undilated_curve(scenario):
    pts = scenario.truth_samples(20000)
    thin, _ = rasterize_curve(scenario.rig, pts)
    for v in range(2):
        sk = skeletonize(dilate(thin[v], 6), v)
        tree = cKDTree(np.column_stack(np.nonzero(thin[v].bits))[:, ::-1])
        d, _ = tree.query(sk.pixels)
        assert d.max() <= 1.5


def test_warmstart_on_default_scenario(scenario, images):
    ws = warmstart_from_images(images, scenario.rig, scenario.base_hints(), scenario.grid)
    assert ws.fit.rms_mm < 1.0
    assert ws.pairs.rejected <= len(ws.pairs)
    assert ws.points.arc_lengths[-1] <= 1.05 * scenario.grid.length
