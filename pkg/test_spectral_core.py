import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from spectral_core import (GridSpec, LocalizationError, PHYSICAL, SPECTRAL, TensorField, VectorField, apply_F,
                           check_localized, curl, divergence_scale, F_norm_exponent, gradient, heat_propagate,
                           kernel_F, leray_project, max_divergence, norms_and_moments, outer_product,
                           tensor_divergence)


def random_field(grid: GridSpec, seed: int) -> VectorField:
    rng = np.random.default_rng(seed)
    envelope = np.exp(-grid.radius ** 2 / 4)
    return VectorField(grid, rng.standard_normal((grid.dim,) + grid.shape) * envelope, PHYSICAL)


def relative(u, v) -> float:
    a, b = u.physical().data, v.physical().data
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


class TestGridSpec(unittest.TestCase):
    def test_rejects_bad_parameters(self):
        with self.assertRaises(ValueError):
            GridSpec(1, 32, 10.0)
        with self.assertRaises(ValueError):
            GridSpec(2, 100, 10.0)
        with self.assertRaises(ValueError):
            GridSpec(2, 32, -1.0)

    def test_origin_is_a_grid_point(self):
        grid = GridSpec(2, 32, 16.0)
        self.assertEqual(grid.coordinates[16], 0.0)
        self.assertEqual(grid.spectral_shape, (32, 17))
        self.assertAlmostEqual(grid.window_time, 4.0)

    def test_kernel_hat_has_unit_integral(self):
        grid = GridSpec(2, 32, 16.0)
        impulse = grid.inverse(grid.kernel_hat(np.ones(grid.spectral_shape)))
        self.assertAlmostEqual(float(grid.integrate(impulse)), 1.0, places=12)
        self.assertAlmostEqual(float(impulse[16, 16]) * grid.cell_volume, 1.0, places=12)


class TestOperators(unittest.TestCase):
    grid = GridSpec(2, 64, 16.0)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_leray_is_idempotent(self, seed):
        u = random_field(self.grid, seed)
        once = leray_project(u)
        self.assertLessEqual(relative(leray_project(once), once), 1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_leray_output_is_divergence_free(self, seed):
        u = random_field(self.grid, seed)
        projected = leray_project(u)
        self.assertLessEqual(max_divergence(projected), 1e-12 * divergence_scale(u))

    def test_leray_annihilates_gradients(self):
        g = gradient(self.grid, np.exp(-self.grid.radius ** 2))
        self.assertLessEqual(leray_project(g).max_abs(), 1e-13 * g.max_abs())

    def test_heat_semigroup(self):
        u = random_field(self.grid, 7)
        composed = heat_propagate(heat_propagate(u, 0.3), 0.5)
        self.assertLessEqual(relative(composed, heat_propagate(u, 0.8)), 1e-12)
        self.assertEqual(composed.representation, PHYSICAL)

    def test_heat_rejects_negative_time(self):
        with self.assertRaises(ValueError):
            heat_propagate(random_field(self.grid, 1), -1.0)

    def test_apply_F_composes_with_heat(self):
        f = outer_product(random_field(self.grid, 3), random_field(self.grid, 4))
        left = apply_F(f, 0.7)
        right = heat_propagate(apply_F(f, 0.2), 0.5)
        self.assertLessEqual(relative(left, right), 1e-12)

    def test_apply_F_is_projected_divergence(self):
        f = outer_product(random_field(self.grid, 8), random_field(self.grid, 9))
        composed = heat_propagate(leray_project(tensor_divergence(f)), 0.4)
        self.assertLessEqual(relative(apply_F(f, 0.4), composed), 1e-12)

    def test_apply_F_needs_positive_time(self):
        f = TensorField.zeros(self.grid)
        with self.assertRaises(ValueError):
            apply_F(f, 0.0)

    def test_outer_product_is_symmetric_for_equal_factors(self):
        u = random_field(self.grid, 5)
        self.assertTrue(outer_product(u, u).symmetric)
        self.assertEqual(outer_product(u, u).representation, SPECTRAL)

    def test_mismatched_grids(self):
        u = random_field(self.grid, 1)
        v = random_field(GridSpec(2, 32, 16.0), 1)
        with self.assertRaises(ValueError):
            u + v


class TestNormsAndMoments(unittest.TestCase):
    def setUp(self):
        self.grid = GridSpec(2, 128, 32.0)
        self.A = 1.5
        self.a = curl(self.grid, self.A * np.exp(-self.grid.radius ** 2))

    def test_curl_is_divergence_free(self):
        self.assertLessEqual(max_divergence(self.a), 1e-12 * divergence_scale(self.a))

    def test_vortex_norms(self):
        report = norms_and_moments(self.a, (1, 2))
        self.assertAlmostEqual(report.lp_values[2.0] ** 2 / (math.pi * self.A ** 2), 1.0, places=8)
        self.assertLess(abs(report.lp_values[1.0] / (math.pi ** 1.5 * self.A) - 1), 2e-3)
        self.assertAlmostEqual(report.weighted_first_moment / (2 * math.pi * self.A), 1.0, places=8)

    def test_vortex_moments_are_antisymmetric(self):
        moments = norms_and_moments(self.a).first_moments
        self.assertAlmostEqual(moments[1, 0] / (math.pi * self.A), 1.0, places=8)
        self.assertAlmostEqual(moments[0, 1] / (math.pi * self.A), -1.0, places=8)
        self.assertLessEqual(abs(moments[0, 0]) + abs(moments[1, 1]), 1e-10)

    def test_unlocalized_data_is_rejected(self):
        wide = curl(self.grid, np.exp(-self.grid.radius ** 2 / 64))
        with self.assertRaises(LocalizationError):
            check_localized(wide)
        with self.assertRaises(LocalizationError):
            norms_and_moments(wide)


class TestKernelF(unittest.TestCase):
    def test_exponent_law(self):
        self.assertEqual(F_norm_exponent(2, 1), -0.5)
        self.assertEqual(F_norm_exponent(2, 2), -1.0)
        self.assertEqual(F_norm_exponent(3, 1), -0.5)

    def test_kernel_is_divergence_free(self):
        grid = GridSpec(2, 64, 16.0)
        F = kernel_F(grid, 1.0)
        self.assertLessEqual(max_divergence(F), 1e-12 * divergence_scale(F))


if __name__ == '__main__':
    unittest.main()
