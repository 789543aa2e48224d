import unittest

import cv2
import numpy as np

from fisheye_plumb.camera_model import (
    FisheyeParams,
    VirtualPinhole,
    default_pinhole,
    forward_map,
)
from fisheye_plumb.dataset_synth import (
    LineSegment,
    SamplerConfig,
    distort_image,
    distort_segments,
    render_line_map,
    sample_params,
    synthetic_perspective_image,
)
from fisheye_plumb.errors import NonMonotoneError, SizeMismatchError
from fisheye_plumb.metrics import psnr
from fisheye_plumb.rasters import ImageBuffer, LineMap
from fisheye_plumb.rectifier import (
    RemapGrid,
    build_distort_remap,
    build_remap,
    interior_mask,
    rectify_image,
    rectify_line_map,
    rectify_points,
    remap_line_map,
    sample_bilinear,
)


def ramp(width, height, a=0.1, b=0.01, c=0.002):
    xs, ys = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return a + b * xs + c * ys


class TestBilinearSampling(unittest.TestCase):
    def test_identity_grid_copies_pixels(self):
        rng = np.random.default_rng(3)
        img = ImageBuffer(rng.uniform(size=(24, 32, 3)))
        out = rectify_image(img, RemapGrid.identity(32, 24))
        np.testing.assert_array_equal(out.data, img.data)
        self.assertTrue(out.valid.all())

    def test_constant_image(self):
        img = ImageBuffer(np.full((20, 20), 0.3))
        rng = np.random.default_rng(4)
        grid = RemapGrid(
            rng.uniform(0, 19, (15, 15)), rng.uniform(0, 19, (15, 15)), np.ones((15, 15)), (20, 20)
        )
        out = rectify_image(img, grid)
        np.testing.assert_allclose(out.data[out.valid], 0.3, atol=1e-12)

    def test_half_pixel_shift_on_ramp(self):
        img = ImageBuffer(ramp(40, 30))
        xs, ys = np.meshgrid(np.arange(39, dtype=float), np.arange(30, dtype=float))
        grid = RemapGrid(xs + 0.5, ys, np.ones_like(xs, dtype=bool), (40, 30))
        out = rectify_image(img, grid)
        expected = 0.1 + 0.01 * (xs + 0.5) + 0.002 * ys
        self.assertLess(np.max(np.abs(out.data[:, :, 0] - expected)), 1e-6)

    def test_affine_images_are_exact(self):
        data = ramp(50, 40, a=0.25, b=-0.003, c=0.007)
        rng = np.random.default_rng(5)
        mx = rng.uniform(0, 49, (25, 25))
        my = rng.uniform(0, 39, (25, 25))
        grid = RemapGrid(mx, my, np.ones((25, 25)), (50, 40))
        out, valid = sample_bilinear(data[:, :, None], np.ones((40, 50), bool), grid)
        expected = 0.25 - 0.003 * mx + 0.007 * my
        self.assertTrue(valid.all())
        self.assertLess(np.max(np.abs(out[:, :, 0] - expected)), 1e-10)

    def test_invalid_neighbour_invalidates_output(self):
        valid = np.ones((10, 10), dtype=bool)
        valid[4, 4] = False
        img = ImageBuffer(np.full((10, 10), 0.5), valid)
        grid = RemapGrid(
            np.array([[3.5, 4.0, 6.0]]), np.array([[3.5, 4.0, 6.0]]), np.ones((1, 3)), (10, 10)
        )
        out = rectify_image(img, grid)
        np.testing.assert_array_equal(out.valid, [[False, False, True]])
        self.assertEqual(out.data[0, 0, 0], 0.0)

    def test_out_of_bounds_entries_are_invalid(self):
        grid = RemapGrid(
            np.array([[-0.5, 0.0, 9.0, 9.2]]), np.zeros((1, 4)), np.ones((1, 4)), (10, 10)
        )
        np.testing.assert_array_equal(grid.valid, [[False, True, True, False]])

    def test_size_mismatch(self):
        img = ImageBuffer(np.zeros((10, 12)))
        with self.assertRaises(SizeMismatchError):
            rectify_image(img, RemapGrid.identity(10, 10))


class TestRemapGrids(unittest.TestCase):
    def setUp(self):
        self.pinhole = default_pinhole(320, 320)
        self.params = FisheyeParams((1.05, -0.04, 0.006, 0.0, 0.0), 118.0, 118.0, 163.0, 157.0)

    def test_centre_reads_principal_point(self):
        grid = build_remap(self.params, self.pinhole)
        self.assertEqual(grid.map_x[160, 160], self.params.u0)
        self.assertEqual(grid.map_y[160, 160], self.params.v0)

    def test_grid_matches_forward_map(self):
        grid = build_remap(self.params, self.pinhole)
        for x, y in ((0, 0), (17, 250), (160, 3), (300, 299)):
            u, v = forward_map(float(x), float(y), self.params, self.pinhole)
            self.assertAlmostEqual(grid.map_x[y, x], u, places=9)
            self.assertAlmostEqual(grid.map_y[y, x], v, places=9)

    def test_non_monotone_refused(self):
        bad = FisheyeParams((1.0, -1.0, 0, 0, 0), 100.0, 100.0, 160, 160)
        with self.assertRaises(NonMonotoneError):
            build_remap(bad, self.pinhole)

    def test_distort_then_rectify_round_trip(self):
        params = sample_params(11, SamplerConfig())
        src = synthetic_perspective_image(12, (320, 320))
        fisheye = distort_image(src, params, self.pinhole)
        back = rectify_image(fisheye, build_remap(params, self.pinhole))
        interior = interior_mask(320, 320) & back.valid
        self.assertGreater(interior.sum(), 1000)
        self.assertGreaterEqual(psnr(back, src, interior), 30.0)

    def test_distort_remap_inverts_remap(self):
        grid = build_distort_remap(self.params, self.pinhole)
        u = np.array([163.0, 200.0, 120.0])
        v = np.array([157.0, 190.0, 100.0])
        xs = grid.map_x[v.astype(int), u.astype(int)]
        ys = grid.map_y[v.astype(int), u.astype(int)]
        u2, v2 = forward_map(xs, ys, self.params, self.pinhole)
        np.testing.assert_allclose(u2, u, atol=1e-8)
        np.testing.assert_allclose(v2, v, atol=1e-8)


class TestRectifyPoints(unittest.TestCase):
    def setUp(self):
        self.pinhole = VirtualPinhole(90.0, 320, 320)
        self.params = FisheyeParams((100.0, -6.0, 1.2, -0.08, 0.002), 1.0, 1.0, 158.0, 162.0)

    def test_principal_point_maps_to_centre(self):
        result = rectify_points([[158.0, 162.0]], self.params, self.pinhole)
        np.testing.assert_array_equal(result.xy, [[160.0, 160.0]])
        self.assertTrue(result.valid.all())

    def test_round_trip(self):
        rng = np.random.default_rng(21)
        xs = rng.uniform(0, 319, 10_000)
        ys = rng.uniform(0, 319, 10_000)
        u, v = forward_map(xs, ys, self.params, self.pinhole)
        result = rectify_points(np.column_stack([u, v]), self.params, self.pinhole)
        self.assertTrue(result.valid.all())

        u2, v2 = forward_map(result.xy[:, 0], result.xy[:, 1], self.params, self.pinhole)
        self.assertLess(np.max(np.hypot(u2 - u, v2 - v)), 1e-8)

    def test_out_of_range_reported_per_point(self):
        far = self.params.u0 + self.params.r_max + 5.0
        result = rectify_points([[200.0, 170.0], [far, 162.0]], self.params, self.pinhole)
        np.testing.assert_array_equal(result.valid, [True, False])
        self.assertTrue(np.isnan(result.xy[1]).all())
        self.assertTrue(np.isfinite(result.xy[0]).all())


class TestLineMaps(unittest.TestCase):
    def setUp(self):
        self.pinhole = default_pinhole(96, 96)
        self.params = FisheyeParams((0.9, 0.02, -0.004, 0.0, 0.0), 36.0, 36.0, 48.0, 48.0)

    def test_zero_map_stays_zero(self):
        out = rectify_line_map(LineMap.zeros(96, 96), self.params, self.pinhole)
        self.assertEqual(out.data.max(), 0.0)
        self.assertEqual(out.size, (96, 96))

    def test_scalar_resampling_matches_image_path(self):
        rng = np.random.default_rng(8)
        data = rng.uniform(size=(96, 96))
        grid = build_remap(self.params, self.pinhole)
        from_map = remap_line_map(LineMap(data), grid)
        from_image = rectify_image(ImageBuffer(data), grid)
        np.testing.assert_array_equal(from_map.data, from_image.data[:, :, 0])
        np.testing.assert_array_equal(from_map.valid, from_image.valid)

    def test_interior_mask(self):
        mask = interior_mask(100, 80, fraction=0.5)
        self.assertTrue(mask[40, 50])
        self.assertFalse(mask[0, 0])
        self.assertFalse(mask[40, 71])
        self.assertTrue(mask[40, 69])


class TestLineMapResampling(unittest.TestCase):
    def setUp(self):
        self.pinhole = default_pinhole(320, 320)
        self.params = FisheyeParams((1.0, -0.04, 0.004, 0.0, 0.0), 110.0, 110.0, 162.0, 158.0)
        self.segments = [
            LineSegment((120.0, 140.0), (200.0, 165.0)),
            LineSegment((150.0, 110.0), (170.0, 210.0)),
        ]

    def test_distort_then_rectify_keeps_the_map(self):
        original = render_line_map(self.segments, (320, 320))
        fisheye = remap_line_map(original, build_distort_remap(self.params, self.pinhole))
        back = rectify_line_map(fisheye, self.params, self.pinhole)

        region = interior_mask(320, 320) & back.valid
        self.assertGreater(region.sum(), 10_000)
        error = np.abs(back.data[region] - original.data[region])
        self.assertLess(float(error.mean()), 0.02 * original.data.max())

    def test_rectified_support_stays_near_the_segments(self):
        """Test that rectified line pixels lie within 1 px of the true segment pixels"""
        polylines, _ = distort_segments(self.segments, self.params, self.pinhole)
        distorted = render_line_map(polylines, (320, 320), lengths=[1.0] * len(polylines))
        rectified = rectify_line_map(distorted, self.params, self.pinhole)

        central = interior_mask(320, 320, fraction=0.25) & rectified.valid
        support = central & (rectified.data >= 0.5)
        self.assertGreater(support.sum(), 50)
        truth = render_line_map(self.segments, (320, 320)).positive
        near = cv2.dilate(truth.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
        self.assertFalse(np.any(support & ~near))


if __name__ == "__main__":
    unittest.main()
