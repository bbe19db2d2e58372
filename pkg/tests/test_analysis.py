import unittest
from unittest.mock import patch

import numpy as np

from fbsdej.analysis import (GRADCHECK_NETS, ErrorReport, fit_rate, gradcheck_shapes, measure_errors, posterior_check,
                             rate_study, reference_paths, self_checks, tower_gap)
from fbsdej.deep_solver import OraclePolicy
from fbsdej.net import NetworkConfig, gradcheck, init_params
from fbsdej.problem import constant_problem, example_1d, example_highdim
from fbsdej.stochastic_kernel import make_noise

# Checkpoints of the 5-run example 1 training table: loss and averaged y0
TABLE_LOSS = [0.81450, 0.47035, 0.28713, 0.19740, 0.15480, 0.13411, 0.12658, 0.12275]
TABLE_Y0 = [1.63112, 1.77590, 1.87463, 1.93226, 1.96436, 1.98160, 1.99001, 1.99324]


class TestErrors(unittest.TestCase):

    def test_constant_problem_has_no_error(self):
        spec = constant_problem()
        report = measure_errors(OraclePolicy(spec), spec, spec.grid(5), 50)
        self.assertEqual(report.total, 0.0)
        self.assertEqual(report.y0_sq_error, 0.0)
        self.assertEqual(report.samples, 50)

    def test_reference_paths_use_exact_quantities(self):
        spec = example_1d()
        grid = spec.grid(4)
        noise = make_noise(grid, 1, 20, spec.measure, seed=1)
        paths = reference_paths(spec, grid, noise)
        t = grid.nodes[2]
        x = paths.X[:, 2, 0]
        np.testing.assert_allclose(paths.Y[:, 2], np.sin(x + t) + 2.0)
        np.testing.assert_allclose(paths.Z[:, 2, 0], np.cos(x + t), atol=1e-12)
        np.testing.assert_allclose(paths.Gamma[:, 2], 2.0 * (np.sin(1.0) - 1.0) * np.sin(x + t), atol=1e-8)

    def test_oracle_errors_are_time_discretisation_only(self):
        """Exact policies share the reference X, so only Y carries Euler error and y0 is exact."""
        spec = example_1d()
        report = measure_errors(OraclePolicy(spec), spec, spec.grid(10), 500, seed=3)
        self.assertEqual(report.x_sup_mse, 0.0)
        self.assertEqual(report.y0_sq_error, 0.0)
        self.assertGreater(report.y_sup_mse, 0.0)
        self.assertAlmostEqual(report.h, 0.1)
        self.assertGreater(report.y_stderr, 0.0)

    def test_untrained_network_is_worse_than_oracle(self):
        spec = example_1d()
        grid = spec.grid(10)
        params = init_params(NetworkConfig(), d=1, N=10, seed=0)
        untrained = measure_errors(params, spec, grid, 200, seed=4)
        oracle = measure_errors(OraclePolicy(spec), spec, grid, 200, seed=4)
        self.assertGreater(untrained.total, oracle.total)
        self.assertAlmostEqual(untrained.y0_sq_error, 4.0)

    def test_report_frame(self):
        spec = constant_problem()
        frame = measure_errors(OraclePolicy(spec), spec, spec.grid(3), 10).to_frame()
        self.assertEqual(list(frame.columns), ["metric", "value", "stderr"])
        self.assertIn("total", frame["metric"].tolist())

    def test_needs_exact_solution(self):
        spec = example_highdim(d=2, mark_mode="per_coordinate")
        with self.assertRaises(ValueError):
            measure_errors(OraclePolicy(example_1d()), spec, spec.grid(3), 10)

    def test_negative_metric_rejected(self):
        with self.assertRaises(ValueError):
            ErrorReport(x_sup_mse=-1.0, y_sup_mse=0.0, z_sum_mse=0.0, gamma_sum_mse=0.0, y0_sq_error=0.0,
                        x_stderr=0.0, y_stderr=0.0, z_stderr=0.0, gamma_stderr=0.0, samples=1, h=0.1)


class TestRates(unittest.TestCase):

    def test_fit_rate_recovers_planted_slope(self):
        h = np.array([0.1, 0.05, 0.025])
        slope, intercept, r_squared, _, degenerate = fit_rate(h, 3.0 * h ** 1.0)
        self.assertFalse(degenerate)
        self.assertAlmostEqual(slope, 1.0)
        self.assertAlmostEqual(intercept, np.log(3.0))
        self.assertAlmostEqual(r_squared, 1.0)

    def test_zero_errors_are_degenerate(self):
        spec = constant_problem()
        report = rate_study(spec, [4, 8, 16], 50)
        self.assertTrue(report.degenerate)
        self.assertTrue(np.isnan(report.slope))
        self.assertEqual(report.levels["N"].tolist(), [4, 8, 16])

    def test_oracle_alias(self):
        report = rate_study(constant_problem(), [2, 4, 8], 20, mode="oracle_policy")
        self.assertEqual(report.mode, "oracle")

    def test_rate_frame(self):
        frame = rate_study(constant_problem(), [2, 4, 8], 20).to_frame()
        self.assertEqual(frame["level"].tolist(), ["N=2", "N=4", "N=8", "slope", "intercept", "r_squared"])

    def test_needs_three_levels(self):
        with self.assertRaises(ValueError):
            rate_study(example_1d(), [10, 20, 20], 100)
        with self.assertRaises(ValueError):
            rate_study(example_1d(), [10, 20, 40], 100, mode="monte_carlo")
        with self.assertRaises(ValueError):
            rate_study(example_highdim(d=2), [10, 20, 40], 100, mode="markovian_quadrature")

    def test_grid_scheme_rate_runs(self):
        spec = example_1d()
        report = rate_study(spec, [2, 4, 8], 100, mode="markovian_quadrature", x_grid=np.linspace(-6.0, 6.0, 61))
        self.assertFalse(report.degenerate)
        self.assertTrue(np.all(report.levels["error"] > 0))
        self.assertTrue(np.isfinite(report.slope))


class TestPosterior(unittest.TestCase):

    def test_table_trajectory_is_rank_monotone(self):
        """Loss and |y0 - 2|^2 fall together along the training table."""
        errors = [(y - 2.0) ** 2 for y in TABLE_Y0]
        diagnostic = posterior_check(list(zip(TABLE_LOSS, errors)))
        self.assertAlmostEqual(diagnostic.spearman, 1.0)
        self.assertFalse(diagnostic.degenerate)
        self.assertGreaterEqual(diagnostic.a, 0.0)
        self.assertGreaterEqual(diagnostic.b, 0.0)
        self.assertTrue(np.all(diagnostic.bound(TABLE_LOSS) >= np.array(errors) - 1e-15))

    def test_planted_linear_bound(self):
        """error^2 = 0.5 loss exactly: b = 0.5, a = 0."""
        loss = np.linspace(0.1, 1.0, 8)
        diagnostic = posterior_check(list(zip(loss, 0.5 * loss)))
        self.assertAlmostEqual(diagnostic.b, 0.5, places=8)
        self.assertAlmostEqual(diagnostic.a, 0.0, places=8)

    def test_constant_loss_is_degenerate(self):
        diagnostic = posterior_check([(0.2, e) for e in (0.1, 0.2, 0.3, 0.4, 0.5)])
        self.assertTrue(diagnostic.degenerate)
        self.assertTrue(np.isnan(diagnostic.spearman))
        self.assertGreaterEqual(float(diagnostic.bound(0.2)), 0.5 - 1e-12)

    def test_accepts_error_reports(self):
        reports = [ErrorReport(x_sup_mse=0.0, y_sup_mse=0.0, z_sum_mse=0.0, gamma_sum_mse=0.0, y0_sq_error=e,
                               x_stderr=0.0, y_stderr=0.0, z_stderr=0.0, gamma_stderr=0.0, samples=10, h=0.05)
                   for e in (0.5, 0.3, 0.2, 0.1, 0.05)]
        diagnostic = posterior_check(list(zip([0.9, 0.6, 0.4, 0.3, 0.2], reports)))
        self.assertAlmostEqual(diagnostic.spearman, 1.0)

    def test_needs_five_checkpoints(self):
        with self.assertRaises(ValueError):
            posterior_check([(0.1, 0.1)] * 4)


class TestSelfChecks(unittest.TestCase):

    def test_example_one_passes(self):
        table = self_checks(example_1d(), seed=0)
        self.assertEqual(list(table.columns), ["check", "value", "tolerance", "passed"])
        self.assertEqual(set(table["check"]), {"levy_integral_polynomial", "gamma_oracle", "pide_residual_max",
                                               "gradient_check", "poisson_mean_zscore", "poisson_var_zscore",
                                               "mark_mean_zscore", "quadrature_tower"})
        self.assertTrue(table["passed"].all(), table.to_string())

    def test_gradient_check_covers_hundred_nets(self):
        shapes = gradcheck_shapes(seed=0)
        self.assertEqual(len(shapes), GRADCHECK_NETS)
        self.assertEqual(GRADCHECK_NETS, 100)
        self.assertTrue(all(shape.activation == "tanh" for shape in shapes))
        self.assertGreater(len(set(shape.layer_dims for shape in shapes)), 20)
        with patch("fbsdej.analysis.gradcheck", wraps=gradcheck) as check:
            table = self_checks(constant_problem(), seed=0)
        self.assertEqual(check.call_count, 100)
        self.assertTrue(table.set_index("check").loc["gradient_check", "passed"])

    def test_tower_property(self):
        self.assertLess(tower_gap(example_1d(), 0.05), 1e-8)

    def test_high_dimension_skips_tower(self):
        table = self_checks(example_highdim(d=3), seed=1)
        self.assertNotIn("quadrature_tower", table["check"].tolist())
        self.assertTrue(table["passed"].all(), table.to_string())


if __name__ == '__main__':
    unittest.main()
