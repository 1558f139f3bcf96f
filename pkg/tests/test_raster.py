import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from backbone_recon.camera import CameraModel, Distortion
from backbone_recon.raster import (BinaryImage, EmptyImageError, PGMFormatError, dilate, disk_offsets,
                                   extract_pixels, rasterize_points, read_pgm, render_views, round_half_away,
                                   write_pgm)


def disk_structure(r):
    a = np.arange(-r, r + 1)
    return np.add.outer(a * a, a * a) <= r * r


def test_disk_size_matches_lattice_count():
    # number of integer points in the closed disk of radius 15
    assert len(disk_offsets(15)) == 709
    assert len(disk_offsets(0)) == 1 and len(disk_offsets(1)) == 5


def test_single_pixel_dilates_to_disk():
    img = BinaryImage.black(100, 80)
    img.bits[40, 50] = True
    assert dilate(img, 15).n_white == 709


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 12), st.lists(st.tuples(st.integers(0, 59), st.integers(0, 69)), min_size=1, max_size=25))
def test_dilation_matches_scipy(radius, points):
    img = BinaryImage.black(70, 60)
    for v, u in points:
        img.bits[v, u] = True
    expected = ndimage.binary_dilation(img.bits, structure=disk_structure(radius)) if radius else img.bits
    assert np.array_equal(dilate(img, radius).bits, expected)


def test_round_half_away_from_zero():
    assert round_half_away(np.array([0.5, 1.5, -0.5, 2.4999])).tolist() == [1, 2, -1, 2]


def test_straight_line_gives_one_pixel_column():
    K = np.array([[1000.0, 0, 50], [0, 1000.0, 50], [0, 0, 1]])
    cam = CameraModel(np.eye(3), np.zeros(3), K, Distortion(), (101, 101))
    y = np.linspace(-2.0, 2.0, 2001)
    pts = np.column_stack([np.zeros_like(y), y, np.full_like(y, 100.0)])
    img, skipped = rasterize_points(cam, pts)
    assert skipped == 0
    cols = np.nonzero(img.bits.any(axis=0))[0]
    assert cols.tolist() == [50]
    assert img.bits[:, 50].sum() == 41


def test_out_of_frame_points_are_counted():
    K = np.array([[10.0, 0, 5], [0, 10.0, 5], [0, 0, 1]])
    cam = CameraModel(np.eye(3), np.zeros(3), K, Distortion(), (11, 11))
    img, skipped = rasterize_points(cam, np.array([[0, 0, 1.0], [100, 0, 1.0], [0, 0, -1.0]]))
    assert skipped == 2 and img.n_white == 1
    with pytest.raises(EmptyImageError):
        rasterize_points(cam, np.array([[100, 0, 1.0]]))


def test_extract_pixels_row_major():
    img = BinaryImage.black(4, 3)
    img.bits[2, 0] = img.bits[0, 3] = img.bits[0, 1] = True
    assert extract_pixels(img).coords.tolist() == [[1, 0], [3, 0], [0, 2]]
    with pytest.raises(EmptyImageError):
        extract_pixels(BinaryImage.black(3, 3))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = BinaryImage(rng.random((37, 53)) < 0.3)
    write_pgm(img, tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n53 37\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm").bits, img.bits)


def test_pgm_threshold_and_comments(tmp_path):
    body = bytes([0, 127, 128, 255])
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n4 1\n255\n" + body)
    assert read_pgm(tmp_path / "b.pgm").bits.tolist() == [[False, False, True, True]]


@pytest.mark.parametrize("content", [b"P2\n1 1\n255\n0", b"P5\n2 2\n65535\n" + bytes(8), b"P5\n4 4\n255\n" + bytes(3)])
def test_pgm_rejects_bad_files(tmp_path, content):
    (tmp_path / "c.pgm").write_bytes(content)
    with pytest.raises(PGMFormatError):
        read_pgm(tmp_path / "c.pgm")


def test_default_scenario_renders_full_size_images(scenario, images):
    assert len(images) == 2
    for im in images:
        assert (im.width, im.height) == (2448, 2048)
    # dilated tube covers roughly 2r+1 pixels across its projected length
    assert 40_000 < sum(im.n_white for im in images) < 70_000


def test_zero_radius_gives_thin_curve(scenario):
    pts = scenario.truth_samples(4000)
    thin, _ = render_views(scenario.rig, pts, radius=0)
    # a thin 8-connected curve: each white pixel has at most a few white neighbours
    for im in thin:
        counts = ndimage.convolve(im.bits.astype(int), np.ones((3, 3), int), mode="constant")
        assert counts[im.bits].max() <= 5
