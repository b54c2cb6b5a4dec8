import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tubeloc.errors import DegenerateFitError, IntersectionError, NoContourError, StageError
from tubeloc.imgcore import GrayImage
from tubeloc.posecv import (
    BinaryMask,
    Contour,
    LineFit,
    SmallCropWarning,
    adaptive_mean_threshold,
    endpoints_from_contour,
    equalize_hist,
    estimate_pose_2d,
    fill_polygon,
    find_contours,
    fit_line_least_squares,
    fold_angle,
    gaussian_blur,
    select_tube_contour,
    sobel_magnitude,
)
from tubeloc.synth import render_tube

small_images = st.tuples(st.integers(1, 16), st.integers(1, 16), st.integers(0, 10_000)).map(
    lambda t: np.random.default_rng(t[2]).integers(0, 256, (t[0], t[1]), dtype=np.uint8))


def orientation_error(a, b):
    d = abs(a - b) % 180
    return min(d, 180 - d)


@settings(max_examples=30, deadline=None)
@given(small_images)
def test_blur_oracle(px):
    if min(px.shape) < 5:
        return
    got = gaussian_blur(GrayImage(px)).pixels.astype(int)
    assert np.abs(got - oracles.gaussian_blur(px)).max() <= 1


def test_blur_small_crop_passthrough():
    img = GrayImage(np.arange(12, dtype=np.uint8).reshape(3, 4))
    with pytest.warns(SmallCropWarning):
        assert gaussian_blur(img) == img


@settings(max_examples=30, deadline=None)
@given(small_images)
def test_sobel_oracle(px):
    if min(px.shape) < 3:
        with pytest.raises(StageError, match="sobel"):
            sobel_magnitude(GrayImage(px))
        return
    np.testing.assert_array_equal(sobel_magnitude(GrayImage(px)).pixels, oracles.sobel(px))


def test_sobel_flat_and_step():
    assert sobel_magnitude(GrayImage(np.full((5, 5), 90, np.uint8))).pixels.max() == 0
    step = np.zeros((5, 6), np.uint8)
    step[:, 3:] = 200
    out = sobel_magnitude(GrayImage(step)).pixels
    assert out[2, 2] == 255 and out[2, 0] == 0


def test_equalize():
    assert equalize_hist(GrayImage(np.full((4, 4), 7, np.uint8))).pixels.max() == 0
    px = np.random.default_rng(0).integers(10, 60, (20, 20), dtype=np.uint8)
    eq = equalize_hist(GrayImage(px)).pixels
    assert eq.min() == 0 and eq.max() == 255
    order = np.argsort(px.ravel(), kind="stable")
    assert np.all(np.diff(eq.ravel()[order].astype(int)) >= 0)


@settings(max_examples=30, deadline=None)
@given(small_images, st.sampled_from([3, 5, 7, 15]), st.integers(-10, 20))
def test_threshold_oracle(px, block, offset):
    got = adaptive_mean_threshold(GrayImage(px), block, offset).bits
    np.testing.assert_array_equal(got, oracles.adaptive_threshold(px, block, offset))


def test_threshold_block_validation():
    with pytest.raises(ValueError):
        adaptive_mean_threshold(GrayImage(np.zeros((4, 4), np.uint8)), block=4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.floats(0.1, 0.8), st.integers(0, 10_000))
def test_find_contours_oracle(h, w, p, seed):
    bits = np.random.default_rng(seed).random((h, w)) < p
    got = sorted(sorted(map(tuple, c.filled.tolist())) for c in find_contours(BinaryMask(bits)))
    ref = sorted(sorted(s) for s in oracles.filled_components(bits))
    assert got == ref


def test_ring_contour_fills_hole():
    bits = np.zeros((7, 7), bool)
    bits[1:6, 1:6] = True
    bits[3, 3] = False
    (c,) = find_contours(BinaryMask(bits))
    assert c.area == 25 and c.centroid == (3.0, 3.0)
    assert len(c.points) == 16
    assert c.encloses(3, 3) and c.encloses(1, 1) and not c.encloses(0, 0)


def test_single_pixel_contour_skipped_by_selection():
    bits = np.zeros((5, 5), bool)
    bits[2, 2] = True
    (c,) = find_contours(BinaryMask(bits))
    assert len(c) == 1 and c.area == 1
    with pytest.raises(NoContourError):
        select_tube_contour([c], (2, 2))


def test_empty_mask():
    assert find_contours(BinaryMask(np.zeros((4, 4), bool))) == []
    with pytest.raises(NoContourError):
        select_tube_contour([], (0, 0))


def test_fill_polygon_square():
    pts = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
    assert len(fill_polygon(pts)) == 9


def _blob(x0, y0, w, h):
    return Contour.from_points([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)])


def test_select_prefers_enclosing_then_nearest():
    big, small, far = _blob(0, 0, 20, 20), _blob(5, 5, 6, 6), _blob(40, 40, 4, 4)
    chosen, degraded = select_tube_contour([big, small, far], (8, 8))
    assert chosen is small and not degraded
    chosen, degraded = select_tube_contour([small, far], (30, 30))
    assert chosen is far and degraded


def test_select_tie_breaks_on_area():
    a, b = _blob(0, 0, 10, 10), _blob(2, 2, 6, 6)  # same moment centroid
    chosen, _ = select_tube_contour([a, b], (5, 5))
    assert chosen is b


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 179.9), st.integers(0, 10_000))
def test_line_fit_recovers_angle(angle, seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-50, 50, 200)
    th = np.radians(angle)
    pts = np.stack([10 + t * np.cos(th), 20 + t * np.sin(th)], 1) + rng.normal(0, 0.01, (200, 2))
    fit = fit_line_least_squares(pts)
    assert orientation_error(fit.angle_deg, angle) < 0.05
    assert 0 <= fit.angle_deg < 180 and fit.direction[0] >= 0


def test_line_fit_is_permutation_invariant():
    pts = np.random.default_rng(0).normal(size=(50, 2)) * [5, 1]
    a = fit_line_least_squares(pts)
    b = fit_line_least_squares(pts[::-1])
    np.testing.assert_allclose(a.direction, b.direction, atol=1e-12)


def test_line_fit_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_line_least_squares([(1, 1), (1, 1), (1, 1)])
    with pytest.warns(UserWarning, match="isotropic"):
        fit_line_least_squares([(0, 0), (1, 0), (0, 1), (1, 1)])


def test_fold_angle():
    assert fold_angle(-30) == 150 and fold_angle(180) == 0 and fold_angle(359.5) == pytest.approx(179.5)


def test_endpoints_on_rectangle():
    c = _blob(0, 0, 20, 4)
    pose = endpoints_from_contour(c, LineFit((1.0, 0.0), (10.0, 2.0)))
    np.testing.assert_allclose(pose.endpoints, [(0, 2), (20, 2)])
    assert pose.orientation_deg == 0


def test_endpoints_need_two_crossings():
    with pytest.raises(IntersectionError):
        endpoints_from_contour(_blob(0, 0, 4, 4), LineFit((1.0, 0.0), (10.0, 50.0)))


def test_blank_crop_has_no_contour():
    with pytest.raises(NoContourError):
        estimate_pose_2d(GrayImage(np.full((60, 60), 95, np.uint8)), (30, 30))


def test_pose_on_rendered_tube(tmp_path):
    img = render_tube(120, 100, (60, 50), 35, 80)
    pose = estimate_pose_2d(img, (60, 50), debug_dir=tmp_path)
    assert orientation_error(pose.orientation_deg, 35) < 2
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "blur.pgm", "contour.pgm", "equalized.pgm", "mask.pgm", "sobel.pgm"]


def test_pose_respects_crop_origin():
    full = render_tube(200, 160, (110, 90), 60, 70)
    crop = GrayImage(full.pixels[40:150, 50:180], origin=(50, 40))
    a = estimate_pose_2d(full, (110, 90))
    b = estimate_pose_2d(crop, (60, 50))
    assert orientation_error(a.orientation_deg, b.orientation_deg) < 1
    assert b.centroid == (110.0, 90.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 179), st.integers(40, 110), st.integers(0, 10_000))
def test_pose_equivariance(angle, length, seed):
    """Rotating the crop by 180 degrees or transposing it transforms the pose exactly."""
    rng = np.random.default_rng(seed)
    size = length + 40
    cx, cy = size / 2 + rng.uniform(-3, 3), size / 2 + rng.uniform(-3, 3)
    img = render_tube(size, size, (cx, cy), angle, length)
    base = estimate_pose_2d(img, (cx, cy))
    assert orientation_error(base.orientation_deg, angle) < 2

    rot = estimate_pose_2d(GrayImage(img.pixels[::-1, ::-1]), (size - 1 - cx, size - 1 - cy))
    assert orientation_error(rot.orientation_deg, base.orientation_deg) < 1e-6
    ends = sorted(map(tuple, np.array(base.endpoints)))
    rot_ends = sorted(tuple(size - 1 - np.array(p)) for p in rot.endpoints)
    np.testing.assert_allclose(rot_ends, ends, atol=1e-6)

    tr = estimate_pose_2d(GrayImage(img.pixels.T), (cy, cx))
    assert orientation_error(tr.orientation_deg, fold_angle(90 - base.orientation_deg)) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(-30, 30), st.integers(-30, 30), st.floats(0, 179))
def test_pose_translation_invariance(dx, dy, angle):
    a = render_tube(160, 160, (80, 80), angle, 70)
    b = render_tube(160, 160, (80 + dx, 80 + dy), angle, 70)
    pa = estimate_pose_2d(a, (80, 80))
    pb = estimate_pose_2d(b, (80 + dx, 80 + dy))
    assert orientation_error(pa.orientation_deg, pb.orientation_deg) < 1.0
