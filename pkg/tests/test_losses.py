import unittest

import numpy as np

from fisheye_plumb.calibrator import evaluate_rpe
from fisheye_plumb.camera_model import FisheyeParams, default_pinhole
from fisheye_plumb.dataset_synth import distort_segments, random_segments, render_line_map
from fisheye_plumb.errors import DegenerateError, InvalidParamsError, SizeMismatchError
from fisheye_plumb.losses import (
    PARAM_WEIGHTS,
    LossWeights,
    ParamHeads,
    combine_params,
    curvature_loss,
    finite_diff_grad,
    global_param_loss,
    line_map_loss,
    local_param_loss,
    total_loss,
)
from fisheye_plumb.rasters import LineMap

TRUTH = FisheyeParams((1.0, -0.04, 0.004, 0.0, 0.0), 110.0, 110.0, 162.0, 158.0)
PINHOLE = default_pinhole(320, 320)


def reference_omega():
    polylines, _ = distort_segments(random_segments(51, (320, 320), count=8), TRUTH, PINHOLE)
    return render_line_map(polylines, (320, 320))


class TestLineMapLoss(unittest.TestCase):
    def test_identical_maps(self):
        target = np.array([[0.0, 3.0, 3.0], [0.0, 0.0, 7.5]])
        self.assertEqual(line_map_loss(target, target), 0.0)

    def test_four_pixel_example(self):
        target = LineMap(np.array([[5.0, 0.0, 0.0, 0.0]]))
        pred = LineMap(np.array([[5.0, 1.0, 0.0, 0.0]]))
        self.assertAlmostEqual(line_map_loss(pred, target), 0.25, places=15)

    def test_class_balancing_oracle(self):
        rng = np.random.default_rng(6)
        target = np.where(rng.uniform(size=(6, 7)) > 0.7, rng.uniform(1, 50, (6, 7)), 0.0)
        pred = rng.uniform(0, 50, (6, 7))

        n_total = target.size
        n_pos = sum(1 for value in target.ravel() if value > 0)
        expected = 0.0
        for y in range(6):
            for x in range(7):
                d = (pred[y, x] - target[y, x]) ** 2
                if target[y, x] > 0:
                    expected += (n_total - n_pos) / n_total * d
                else:
                    expected += n_pos / n_total * d
        self.assertAlmostEqual(line_map_loss(pred, target), expected, delta=1e-9 * expected)

    def test_empty_target_warns(self):
        with self.assertWarns(RuntimeWarning):
            value = line_map_loss(np.ones((3, 3)), np.zeros((3, 3)))
        self.assertEqual(value, 0.0)

    def test_size_mismatch(self):
        with self.assertRaises(SizeMismatchError):
            line_map_loss(np.zeros((3, 3)), np.zeros((3, 4)))


class TestParamLosses(unittest.TestCase):
    def setUp(self):
        self.truth = TRUTH.as_vector()

    def test_global_zero_at_truth(self):
        self.assertEqual(global_param_loss(TRUTH, TRUTH), 0.0)

    def test_global_unit_weights(self):
        delta = np.zeros(9)
        delta[0] = 1.0
        self.assertAlmostEqual(
            global_param_loss(self.truth + delta, self.truth, w=np.ones(9)), 1.0 / 9.0, places=15
        )

    def test_global_default_weights(self):
        delta = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
        self.assertAlmostEqual(global_param_loss(self.truth + delta, self.truth), 0.3, places=12)

    def test_global_shape_check(self):
        with self.assertRaises(SizeMismatchError):
            global_param_loss(np.zeros(8), np.zeros(9))

    def test_local_examples(self):
        head = self.truth[:5].copy()
        self.assertEqual(local_param_loss(head, self.truth), 0.0)
        head[2] += 1.0
        single = local_param_loss(head, self.truth)
        self.assertAlmostEqual(single, 0.1, places=12)
        total = sum(local_param_loss(head, self.truth) for _ in range(5))
        self.assertAlmostEqual(total, 5 * single, places=12)

    def test_local_shape_check(self):
        with self.assertRaises(SizeMismatchError):
            local_param_loss(np.zeros(4), self.truth)

    def test_weights_validation(self):
        with self.assertRaises(SizeMismatchError):
            LossWeights(w=(1.0,) * 8)
        with self.assertRaises(InvalidParamsError):
            LossWeights(lambda_c=-1.0)
        self.assertEqual(LossWeights().w, PARAM_WEIGHTS)


class TestCurvatureLoss(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.omega = reference_omega()

    def test_zero_at_truth(self):
        self.assertEqual(curvature_loss(TRUTH, TRUTH, self.omega, PINHOLE), 0.0)

    def test_matches_rpe_on_line_pixels(self):
        estimate = TRUTH.with_updates(u0=163.0, k=(1.0, -0.035, 0.004, 0.0, 0.0))
        value = curvature_loss(estimate, TRUTH, self.omega, PINHOLE)
        rpe = evaluate_rpe(estimate, TRUTH, self.omega.positive, PINHOLE)
        self.assertLess(abs(value - rpe.mse), 1e-12)

    def test_monotone_in_principal_point_offset(self):
        values = [
            curvature_loss(TRUTH.with_updates(u0=TRUTH.u0 + delta), TRUTH, self.omega, PINHOLE)
            for delta in (0.5, 1.0, 2.0)
        ]
        self.assertGreater(values[0], 0.0)
        self.assertLess(values[0], values[1])
        self.assertLess(values[1], values[2])

    def test_point_and_mask_forms_agree(self):
        estimate = TRUTH.with_updates(v0=159.0)
        a = curvature_loss(estimate, TRUTH, self.omega, PINHOLE)
        b = curvature_loss(estimate, TRUTH, self.omega.positive, PINHOLE)
        c = curvature_loss(estimate, TRUTH, self.omega.positive_pixels(), PINHOLE)
        self.assertEqual(a, b)
        self.assertEqual(a, c)

    def test_non_monotone_estimate_scores_penalty(self):
        bent = TRUTH.with_updates(k=(1.0, -1.0, 0.0, 0.0, 0.0))
        self.assertEqual(curvature_loss(bent, TRUTH, self.omega, PINHOLE, penalty=5.0), 25.0)

    def test_empty_omega(self):
        with self.assertRaises(DegenerateError):
            curvature_loss(TRUTH, TRUTH, LineMap.zeros(320, 320), PINHOLE)

    def test_principal_point_gradient_is_continuous(self):
        def loss(x):
            return curvature_loss(TRUTH.with_updates(u0=TRUTH.u0 + x[0]), TRUTH, self.omega, PINHOLE)

        h = 1e-7
        at_zero = loss([0.0])
        forward = (loss([h]) - at_zero) / h
        backward = (at_zero - loss([-h])) / h
        self.assertLess(abs(forward - backward), 1e-4)
        self.assertLess(abs(finite_diff_grad(loss, [0.0], step=h)[0]), 1e-4)


class TestCombineAndTotal(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.omega = reference_omega()

    def test_consensus_heads_combine_to_truth(self):
        combined = combine_params(ParamHeads.consensus(TRUTH))
        np.testing.assert_allclose(combined.as_vector(), TRUTH.as_vector(), rtol=1e-14)

    def test_k1_average(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_g[0] = 1.0
        heads.K_loc[:, 0] = 7.0
        self.assertAlmostEqual(combine_params(heads).k[0], 6.0, places=12)

    def test_local_heads_leave_scale_and_centre(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_loc += 0.01
        combined = combine_params(heads)
        self.assertEqual(
            (combined.mu, combined.mv, combined.u0, combined.v0),
            (TRUTH.mu, TRUTH.mv, TRUTH.u0, TRUTH.v0),
        )

    def test_heads_shape_checks(self):
        with self.assertRaises(SizeMismatchError):
            ParamHeads(np.zeros(8), np.zeros((5, 5)))
        with self.assertRaises(SizeMismatchError):
            ParamHeads(np.zeros(9), np.zeros((4, 5)))
        with self.assertRaises(InvalidParamsError):
            ParamHeads.from_dict({"K_g": [1.0] * 9})

    def test_zero_at_truth(self):
        breakdown = total_loss(ParamHeads.consensus(TRUTH), TRUTH, self.omega, PINHOLE)
        self.assertEqual(breakdown.global_loss, 0.0)
        self.assertEqual(breakdown.local_loss, 0.0)
        self.assertLess(breakdown.total, 1e-20)

    def test_breakdown_sums_to_total(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_g[7] += 1.0
        heads.K_loc[:, 1] += 0.002
        breakdown = total_loss(heads, TRUTH, self.omega, PINHOLE)
        parts = breakdown.weighted_global + breakdown.weighted_local + breakdown.weighted_curvature
        self.assertLess(abs(parts - breakdown.total), 1e-12)
        self.assertEqual(
            set(breakdown.to_dict()),
            {"total", "global", "local", "curvature", "weighted_global", "weighted_local", "weighted_curvature"},
        )

    def test_curvature_term_dominates(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_g[7] += 1.0
        breakdown = total_loss(heads, TRUTH, self.omega, PINHOLE)
        self.assertEqual(breakdown.weighted_local, 0.0)
        self.assertGreater(breakdown.weighted_global, 0.0)
        self.assertGreater(breakdown.weighted_curvature, breakdown.weighted_global)

    def test_term_weights_scale_linearly(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_g[7] += 1.0
        base = total_loss(heads, TRUTH, self.omega, PINHOLE)
        doubled = total_loss(heads, TRUTH, self.omega, PINHOLE, LossWeights(lambda_c=100.0))
        self.assertAlmostEqual(doubled.weighted_curvature, 2 * base.weighted_curvature, places=10)
        self.assertEqual(doubled.weighted_global, base.weighted_global)

    def test_invalid_combination_scores_penalty(self):
        heads = ParamHeads.consensus(TRUTH)
        heads.K_g[5] = -1.0
        breakdown = total_loss(heads, TRUTH, self.omega, PINHOLE)
        self.assertEqual(breakdown.curvature_loss, 25.0)


class TestFiniteDifferences(unittest.TestCase):
    def test_squared_norm(self):
        grad = finite_diff_grad(lambda x: float(x @ x), [1.0, 2.0])
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)

    def test_global_loss_gradient(self):
        truth = TRUTH.as_vector()
        estimate = truth + np.linspace(0.1, 0.9, 9)
        w = np.array(PARAM_WEIGHTS)
        grad = finite_diff_grad(lambda x: global_param_loss(x, truth), estimate)
        analytic = 2 * w * (estimate - truth) / 9.0
        np.testing.assert_allclose(grad, analytic, rtol=1e-6)

    def test_local_loss_gradient(self):
        truth = TRUTH.as_vector()
        head = truth[:5] + np.array([0.3, -0.2, 0.05, 0.4, -0.1])
        w = np.array(PARAM_WEIGHTS[:5])
        grad = finite_diff_grad(lambda x: local_param_loss(x, truth), head)
        np.testing.assert_allclose(grad, 2 * w * (head - truth[:5]) / 5.0, rtol=1e-6)


if __name__ == "__main__":
    unittest.main()
