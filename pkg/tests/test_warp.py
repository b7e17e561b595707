import numpy as np
import pytest
from scipy import ndimage

from helpers import textured_gray
from planestitch.correlation import flow_from_homography
from planestitch.distortion import to_luma
from planestitch.errors import CanvasMismatch, FoldedMesh, SingularSystem
from planestitch.homography import Homography, compose, invert, random_homography, rect_corners
from planestitch.warp import (
    Canvas,
    WarpedImage,
    bidirectional_stitch,
    check_folding,
    composite_average,
    control_grid,
    frame_canvas,
    local_refinement,
    make_canvas,
    plane_canvas,
    target_in_reference,
    tps_apply,
    tps_solve,
    warp_image_h,
    warp_image_tps,
)


def random_affine(rng):
    a = np.eye(2) + rng.uniform(-0.3, 0.3, (2, 2))
    return a, rng.uniform(-20, 20, 2)


def overlap_mae(a, b):
    m = (a.mask > 0) & (b.mask > 0)
    return float(np.mean(np.abs(to_luma(a.pixels) - to_luma(b.pixels))[m]))


# --- canvases -----------------------------------------------------------------

def test_make_canvas_examples():
    c = make_canvas([rect_corners(1, 1)])
    assert (c.width, c.height) == (1, 1) and c.offset == (0.0, 0.0)
    c = make_canvas([rect_corners(20, 10) + [-10, -4]])
    assert c.offset == (10.0, 4.0) and (c.width, c.height) == (20, 10)


def test_make_canvas_union_of_quads():
    rng = np.random.default_rng(0)
    quads = [rng.uniform(-50, 80, (4, 2)) for _ in range(2)]
    c = make_canvas(quads)
    pts = np.concatenate(quads)
    assert c.offset == (-np.floor(pts[:, 0].min()), -np.floor(pts[:, 1].min()))
    assert c.width == int(np.ceil(pts[:, 0].max()) - np.floor(pts[:, 0].min()))
    assert c.height == int(np.ceil(pts[:, 1].max()) - np.floor(pts[:, 1].min()))
    assert c.shape == (c.height, c.width)


# --- homography warps ---------------------------------------------------------

def test_identity_warp_reproduces_input():
    img = np.random.default_rng(1).random((20, 30, 3))
    out = warp_image_h(img, Homography.identity(), frame_canvas(img))
    np.testing.assert_allclose(out.pixels, img, atol=1e-12)
    assert out.mask.all()


def test_translation_shifts_content_and_masks_strip():
    img = np.random.default_rng(2).random((16, 24))
    out = warp_image_h(img, Homography.translation(5, 0), frame_canvas(img))
    np.testing.assert_allclose(out.pixels[:, 5:], img[:, :-5], atol=1e-12)
    assert not out.mask[:, :5].any() and out.mask[:, 5:].all()
    assert not out.pixels[:, :5].any()


def test_warp_of_ones_is_the_mask():
    rng = np.random.default_rng(3)
    h = random_homography(rng, 64, 48, 0.2)
    canvas = make_canvas([rect_corners(64, 48), h.apply(rect_corners(64, 48))])
    out = warp_image_h(np.ones((48, 64)), h, canvas)
    np.testing.assert_array_equal(out.pixels, out.mask)


def test_warp_round_trip():
    img = textured_gray((96, 128), seed=4, sigma=3.0)
    h = random_homography(np.random.default_rng(5), 128, 96, 0.1)
    canvas = make_canvas([h.apply(rect_corners(128, 96))])
    there = warp_image_h(img, h, canvas)
    to_canvas = compose(Homography.translation(*canvas.offset), h)
    back = warp_image_h(there.pixels, invert(to_canvas), frame_canvas(img))
    valid = warp_image_h(there.mask, invert(to_canvas), frame_canvas(img)).pixels > 1 - 1e-9
    interior = ndimage.binary_erosion(valid & (back.mask > 0), iterations=2)
    assert interior.mean() > 0.5
    assert np.mean(np.abs(back.pixels - img)[interior]) < 2 / 255


# --- thin-plate splines -------------------------------------------------------

def test_tps_identity():
    src = control_grid(100, 80)
    t = tps_solve(src, src)
    q = np.random.default_rng(6).uniform(-10, 110, (200, 2))
    np.testing.assert_allclose(tps_apply(t, q), q, atol=1e-9)


def test_tps_reproduces_affine_maps():
    rng = np.random.default_rng(7)
    for _ in range(100):
        src = rng.uniform(0, 200, (rng.integers(5, 40), 2))
        a, b = random_affine(rng)
        t = tps_solve(src, src @ a.T + b)
        assert np.max(np.abs(t.weights)) < 1e-8
        q = rng.uniform(0, 200, (100, 2))
        np.testing.assert_allclose(tps_apply(t, q), q @ a.T + b, atol=1e-6)
        mid = 0.5 * (src[0] + src[1])
        np.testing.assert_allclose(t.apply(mid), mid @ a.T + b, atol=1e-6)


def test_tps_interpolates_control_points():
    rng = np.random.default_rng(8)
    for _ in range(100):
        src = rng.uniform(0, 300, (rng.integers(3, 60), 2))
        dst = src + rng.normal(0, 5, src.shape)
        t = tps_solve(src, dst)
        assert np.max(np.linalg.norm(tps_apply(t, src) - dst, axis=1)) < 1e-6


def test_tps_single_perturbed_point():
    src = control_grid(120, 120).reshape(-1, 2)
    dst = src.copy()
    dst[84] += [3.0, -2.0]
    t = tps_solve(src, dst)
    np.testing.assert_allclose(tps_apply(t, src), dst, atol=1e-6)


@pytest.mark.parametrize("src", [
    np.array([[0.0, 0], [1, 1], [2, 2], [3, 3]]),
    np.array([[0.0, 0], [1, 0], [0, 1], [1, 0]]),
    np.array([[0.0, 0], [1, 0]]),
])
def test_tps_singular_inputs(src):
    with pytest.raises(SingularSystem):
        tps_solve(src, src)


def test_control_grid_layout():
    g = control_grid(120, 60)
    assert g.shape == (13, 13, 2)
    np.testing.assert_array_equal(g[0, 0], [0, 0])
    np.testing.assert_array_equal(g[-1, -1], [120, 60])
    np.testing.assert_allclose(g[0, 1], [10, 0])
    np.testing.assert_allclose(g[1, 0], [0, 5])


def test_identity_tps_warp():
    img = textured_gray((40, 50), seed=9)
    src = control_grid(49, 39)
    out = warp_image_tps(img, tps_solve(src, src), frame_canvas(img))
    np.testing.assert_allclose(out.pixels, img, atol=1e-9)


def test_affine_tps_warp_matches_homography():
    img = textured_gray((60, 80), seed=10, sigma=3.0)
    a = np.array([[1.05, 0.08], [-0.04, 0.97]])
    b = np.array([3.0, -2.0])
    src = control_grid(79, 59).reshape(-1, 2)
    h = Homography(np.array([[a[0, 0], a[0, 1], b[0]], [a[1, 0], a[1, 1], b[1]], [0, 0, 1]]))
    canvas = make_canvas([h.apply(rect_corners(79, 59))])
    shifted = src @ a.T + b
    got = warp_image_tps(img, tps_solve(src, shifted), canvas)
    want = warp_image_h(img, h, canvas)
    m = (got.mask > 0) & (want.mask > 0)
    assert np.mean(np.abs(got.pixels - want.pixels)[m]) < 2 / 255


def test_folded_grid_rejected():
    src = control_grid(100, 100)
    dst = src.copy()
    dst[6, 6] = dst[6, 8] + [5.0, 0.0]  # vertex pushed past its right neighbour
    t = tps_solve(src, dst)
    with pytest.raises(FoldedMesh):
        check_folding(t)
    with pytest.raises(FoldedMesh):
        warp_image_tps(np.zeros((100, 100)), t, Canvas(100, 100))


# --- bidirectional stitching --------------------------------------------------

def test_identity_stitch_keeps_both_views(small_pair):
    i_ref, i_tgt, _ = small_pair
    rng = np.random.default_rng(11)
    a, b, canvas = bidirectional_stitch(i_ref, i_tgt, Homography.identity(), rng.random(4))
    assert (canvas.width, canvas.height) == (256, 256)
    np.testing.assert_allclose(a.pixels, i_ref, atol=1e-12)
    np.testing.assert_allclose(b.pixels, i_tgt, atol=1e-12)


def test_reference_plane_is_single_plane_baseline(small_pair):
    i_ref, i_tgt, h = small_pair
    a, b, canvas = bidirectional_stitch(i_ref, i_tgt, h, [1.0] * 4)
    ox, oy = (int(v) for v in canvas.offset)
    np.testing.assert_allclose(a.pixels[oy:oy + 256, ox:ox + 256], i_ref, atol=1e-12)
    np.testing.assert_allclose(b.pixels, warp_image_h(i_tgt, invert(h), canvas).pixels, atol=1e-9)


def test_alignment_independent_of_plane(small_pair):
    i_ref, i_tgt, h = small_pair
    base = overlap_mae(*bidirectional_stitch(i_ref, i_tgt, h, [1.0] * 4)[:2])
    rng = np.random.default_rng(12)
    for c in rng.random((10, 4)):
        a, b, _ = bidirectional_stitch(i_ref, i_tgt, h, c)
        assert overlap_mae(a, b) <= base + 2 / 255


def test_stitch_rejects_size_mismatch():
    with pytest.raises(CanvasMismatch):
        bidirectional_stitch(np.zeros((10, 10)), np.zeros((10, 12)), Homography.identity(), [0.5] * 4)


def test_plane_canvas_covers_both_views(small_pair):
    _, _, h = small_pair
    canvas = plane_canvas(h, [0.5] * 4, 256, 256)
    assert canvas.width >= 256 * 0.8 and canvas.height >= 256 * 0.8


def test_target_in_reference_is_backward_warp(small_pair):
    _, i_tgt, h = small_pair
    got = target_in_reference(i_tgt, h, [0.3] * 4, i_tgt.shape)
    want = warp_image_h(i_tgt, invert(h), frame_canvas(i_tgt))
    np.testing.assert_allclose(got.pixels, want.pixels, atol=1e-9)


# --- compositing --------------------------------------------------------------

def test_composite_examples():
    x = WarpedImage(np.full((4, 6), 0.2), np.ones((4, 6)))
    np.testing.assert_array_equal(composite_average(x, x), x.pixels)
    y = WarpedImage(np.full((4, 6), 0.6), np.ones((4, 6)))
    np.testing.assert_allclose(composite_average(x, y), 0.4)
    left = np.zeros((4, 6))
    left[:, :3] = 1
    a = WarpedImage(np.where(left > 0, 0.2, 0.0), left)
    b = WarpedImage(np.where(left > 0, 0.0, 0.6), 1 - left)
    np.testing.assert_allclose(composite_average(a, b), np.where(left > 0, 0.2, 0.6))


def test_composite_idempotent_and_zero_outside():
    rng = np.random.default_rng(13)
    mask = (rng.random((8, 8)) > 0.4).astype(float)
    x = WarpedImage(rng.random((8, 8, 3)) * mask[..., None], mask)
    np.testing.assert_allclose(composite_average(x, x), x.pixels)
    assert not composite_average(x, x)[mask == 0].any()


def test_composite_mismatch():
    with pytest.raises(CanvasMismatch):
        composite_average(WarpedImage(np.zeros((3, 3)), np.ones((3, 3))), WarpedImage(np.zeros((3, 4)), np.ones((3, 4))))


# --- local refinement ---------------------------------------------------------

def test_local_refinement_quiet_on_consistent_flow():
    h = Homography.translation(24.0, -8.0)
    flow = flow_from_homography(h, 16, 16, 16)
    assert local_refinement(flow, h, [0.5] * 4, 256, 256, 16) is None


def test_local_refinement_follows_a_bump():
    h = Homography.identity()
    flow = flow_from_homography(h, 16, 16, 16)
    f = flow.flow.copy()
    f[6:10, 6:10, 0] += 0.5  # half a cell to the right in the middle
    t = local_refinement(type(flow)(f, flow.confidence), h, [0.5] * 4, 256, 256, 16)
    assert t is not None
    moved = np.linalg.norm(t.src - t.dst, axis=1)
    assert moved.max() == pytest.approx(8.0, abs=1e-6)
    centre = np.argmin(np.linalg.norm(t.dst - [128, 128], axis=1))
    assert moved[centre] > 4.0
