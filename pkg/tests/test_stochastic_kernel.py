import unittest

import numpy as np

from fbsdej.problem import TimeGrid
from fbsdej.stochastic_kernel import (JumpMeasureSpec, compensated_gamma_sums, compensator_drift, derive_seed,
                                      levy_integral, make_noise, sample_generator)


class TestJumpMeasure(unittest.TestCase):

    def setUp(self):
        self.measure = JumpMeasureSpec.uniform(1.0)

    def test_uniform_measure_weights(self):
        """lambda(de) = de on [-1, 1] has total mass 2 and a mark law of mass 1."""
        self.assertAlmostEqual(self.measure.total_intensity, 2.0)
        self.assertAlmostEqual(float(np.sum(self.measure.lambda_weights)), 2.0, places=12)
        self.assertAlmostEqual(float(np.sum(self.measure.mark_probabilities)), 1.0, places=12)
        self.assertAlmostEqual(self.measure.gamma_integral, 2.0, places=12)

    def test_levy_integral_exact_on_polynomials(self):
        """32 Gauss-Legendre nodes integrate polynomials up to degree 63 exactly."""
        # integral of e^2 de over [-1, 1] = 2/3, of e^10 = 2/11
        self.assertAlmostEqual(levy_integral(lambda e: e ** 2, self.measure), 2.0 / 3.0, places=12)
        self.assertAlmostEqual(levy_integral(lambda e: e ** 10, self.measure), 2.0 / 11.0, places=12)
        self.assertAlmostEqual(levy_integral(lambda e: e ** 7, self.measure), 0.0, places=12)

    def test_levy_integral_vector_valued(self):
        result = levy_integral(lambda e: np.array([1.0, e]), self.measure)
        np.testing.assert_allclose(result, [2.0, 0.0], atol=1e-12)

    def test_compensator_drift_of_symmetric_jumps(self):
        """beta(e) = e has zero compensator on a symmetric measure; e^2 gives 2/3."""
        drift = compensator_drift(lambda e: np.array([e, e ** 2]), self.measure)
        np.testing.assert_allclose(drift, [0.0, 2.0 / 3.0], atol=1e-12)

    def test_wider_uniform_measure(self):
        measure = JumpMeasureSpec.uniform(0.5)
        self.assertAlmostEqual(measure.total_intensity, 1.0)
        self.assertAlmostEqual(levy_integral(lambda e: e ** 2, measure), 2.0 * 0.5 ** 3 / 3.0, places=12)

    def test_density_must_integrate_to_one(self):
        with self.assertRaises(ValueError):
            JumpMeasureSpec(delta=1.0, density=lambda e: np.ones_like(e), total_intensity=2.0)

    def test_gamma_bound_enforced(self):
        with self.assertRaises(ValueError):
            JumpMeasureSpec.uniform(1.0, gamma=lambda e: 2.0 * np.ones_like(e), gamma_bound=1.0)

    def test_invalid_half_width(self):
        with self.assertRaises(ValueError):
            JumpMeasureSpec.uniform(0.0)

    def test_inverse_cdf_sampling(self):
        """Density (1 + e)/2 on [-1, 1] has mean 1/3 and variance 2/9."""
        measure = JumpMeasureSpec(delta=1.0, density=lambda e: (1.0 + np.asarray(e)) / 2.0, total_intensity=1.0)
        marks = measure.sample_marks(np.random.default_rng(11), 200_000)
        self.assertTrue(np.all(np.abs(marks) <= 1.0))
        self.assertAlmostEqual(float(marks.mean()), 1.0 / 3.0, delta=0.01)
        self.assertAlmostEqual(float(marks.var()), 2.0 / 9.0, delta=0.01)


class TestNoise(unittest.TestCase):

    def setUp(self):
        self.measure = JumpMeasureSpec.uniform(1.0)
        self.grid = TimeGrid.uniform(1.0, 8)

    def test_shapes_and_mask(self):
        noise = make_noise(self.grid, 3, 40, self.measure, seed=5)
        self.assertEqual(noise.dW.shape, (40, 8, 3))
        self.assertEqual(noise.counts.shape, (40, 8))
        self.assertEqual(noise.marks.shape[:2], (40, 8))
        np.testing.assert_array_equal(noise.mask.sum(axis=2), noise.counts)
        # padding slots hold zeros
        self.assertTrue(np.all(noise.marks[~noise.mask] == 0.0))
        i, n = np.argwhere(noise.counts > 0)[0]
        self.assertEqual(len(noise.jump_list(i, n)), noise.counts[i, n])

    def test_same_seed_same_noise(self):
        first = make_noise(self.grid, 2, 10, self.measure, seed=9)
        second = make_noise(self.grid, 2, 10, self.measure, seed=9)
        other = make_noise(self.grid, 2, 10, self.measure, seed=10)
        np.testing.assert_array_equal(first.dW, second.dW)
        np.testing.assert_array_equal(first.marks, second.marks)
        self.assertFalse(np.array_equal(first.dW, other.dW))

    def test_strict_mode_samples_independent_of_batch_size(self):
        """Sample i draws from its own stream, so a smaller batch is a prefix of a larger one."""
        small = make_noise(self.grid, 2, 5, self.measure, seed=3)
        large = make_noise(self.grid, 2, 10, self.measure, seed=3)
        np.testing.assert_array_equal(large.dW[:5], small.dW)
        np.testing.assert_array_equal(large.counts[:5], small.counts)
        width = small.max_jumps
        np.testing.assert_array_equal(large.marks[:5, :, :width], small.marks)
        self.assertTrue(np.all(large.marks[:5, :, width:] == 0.0))

    def test_single_sample_regenerates_from_its_stream(self):
        """Row 7 is the Brownian draws, then the counts, then the marks of stream (seed, 7), step by step."""
        noise = make_noise(self.grid, 2, 12, self.measure, seed=6)
        rng = sample_generator(6, 7)
        dt = np.diff(self.grid.nodes)
        np.testing.assert_array_equal(noise.dW[7], rng.standard_normal((8, 2)) * np.sqrt(dt)[:, None])
        np.testing.assert_array_equal(noise.counts[7], rng.poisson(self.measure.total_intensity * dt))
        marks = self.measure.sample_marks(rng, int(noise.counts[7].sum()))
        np.testing.assert_array_equal(noise.marks[7][noise.mask[7]], marks)

    def test_sample_generator_is_keyed(self):
        a = sample_generator(1, 4).standard_normal(3)
        b = sample_generator(1, 4).standard_normal(3)
        c = sample_generator(1, 5).standard_normal(3)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 2), derive_seed(1, 2))
        self.assertNotEqual(derive_seed(1, 2), derive_seed(1, 3))
        self.assertNotEqual(derive_seed(1, 2), derive_seed(2, 2))

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            make_noise(self.grid, 0, 10, self.measure, seed=0)
        with self.assertRaises(ValueError):
            make_noise(self.grid, 1, 0, self.measure, seed=0)
        with self.assertRaises(ValueError):
            make_noise(self.grid, 1, 10, self.measure, seed=-1)
        with self.assertRaises(ValueError):
            make_noise(self.grid, 1, 10, self.measure, seed=0, mode="parallel")

    def test_compensated_sums_with_unit_gamma(self):
        """gamma = 1: M_gamma = count - dt * 2 delta on every interval."""
        noise = make_noise(self.grid, 1, 50, self.measure, seed=2)
        sums = compensated_gamma_sums(noise, self.measure)
        np.testing.assert_allclose(sums, noise.counts - 2.0 * self.grid.dt[None, :], atol=1e-12)


class TestNoiseMoments(unittest.TestCase):
    """10^6 interval draws: 50,000 paths on a 20-step grid."""

    @classmethod
    def setUpClass(cls):
        cls.measure = JumpMeasureSpec.uniform(1.0)
        cls.grid = TimeGrid.uniform(1.0, 20)
        cls.noise = make_noise(cls.grid, 1, 50_000, cls.measure, seed=123, mode="fast")
        cls.rate = cls.measure.total_intensity * cls.grid.dt[0]

    def test_poisson_counts(self):
        counts = self.noise.counts.ravel().astype(float)
        draws = counts.size
        # Poisson(0.1): mean 0.1, variance 0.1, Var(sample variance) ~ (mu + 2 mu^2) / n
        self.assertLess(abs(counts.mean() - self.rate) / np.sqrt(self.rate / draws), 3.0)
        self.assertLess(abs(counts.var(ddof=1) - self.rate) / np.sqrt((self.rate + 2 * self.rate ** 2) / draws),
                        3.0)

    def test_mark_moments(self):
        """Uniform marks on [-1, 1]: mean 0, variance 1/3."""
        marks = self.noise.marks[self.noise.mask]
        self.assertLess(abs(marks.mean()) / np.sqrt(1.0 / 3.0 / marks.size), 4.0)
        self.assertAlmostEqual(float(marks.var()), 1.0 / 3.0, delta=0.01)

    def test_brownian_increments(self):
        dW = self.noise.dW.ravel()
        dt = self.grid.dt[0]
        self.assertLess(abs(dW.mean()) / np.sqrt(dt / dW.size), 4.0)
        self.assertAlmostEqual(float(dW.var()) / dt, 1.0, delta=0.01)

    def test_compensated_sums_are_centred(self):
        sums = compensated_gamma_sums(self.noise, self.measure).ravel()
        self.assertLess(abs(sums.mean()) / np.sqrt(self.rate / sums.size), 4.0)


if __name__ == '__main__':
    unittest.main()
