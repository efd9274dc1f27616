import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from force_synthesis import lambda_rescale
from initial_data import generate_data
from mild_solver import (PicardConfig, SeparableForcing, SmallnessViolation, TimeGrid, Trajectory, bilinear_G,
                         bilinear_series, bilinear_substeps, contraction_ratios, duhamel_force, duhamel_series,
                         energy_bound_check, etd_weights, integrate, kato_norms, measure_bilinear_constant, picard_iterate)
from spectral_core import GridSpec, ResolutionError, VectorField, heat_hat, kernel_F_hat


class TestTimeGrid(unittest.TestCase):
    def test_geometric_nodes(self):
        tg = TimeGrid.geometric(16.0, 1e-3, 1.2)
        nodes = tg.nodes
        self.assertEqual(nodes[0], 0.0)
        self.assertEqual(nodes[1], 1e-3)
        self.assertEqual(nodes[-1], 16.0)
        self.assertTrue(np.all(np.diff(nodes) > 0))
        ratios = nodes[2:] / nodes[1:-1]
        self.assertLessEqual(float(np.max(ratios)), 1.2 + 1e-12)

    def test_uniform_nodes(self):
        tg = TimeGrid.uniform(1.0, 4)
        self.assertTrue(np.allclose(tg.nodes, [0, 0.25, 0.5, 0.75, 1.0]))
        self.assertTrue(np.allclose(tg.scaled(4.0).nodes, [0, 1, 2, 3, 4]))

    def test_invalid_grids(self):
        with self.assertRaises(ValueError):
            TimeGrid.uniform(1.0, 0)
        with self.assertRaises(ValueError):
            TimeGrid(1.0, 1, "geometric")
        with self.assertRaises(ValueError):
            TimeGrid.geometric(-1.0)
        with self.assertRaises(ValueError):
            TimeGrid(1.0, 4, "logarithmic")


class TestQuadrature(unittest.TestCase):
    def test_etd_weights_integrate_constants(self):
        grid = GridSpec(2, 32, 16.0)
        h = 0.1
        E, left, right = etd_weights(grid, h)
        k2 = grid.k_squared
        expected = np.where(k2 > 0, (1 - np.exp(-h * k2)) / np.where(k2 > 0, k2, 1.0), h)
        self.assertTrue(np.allclose(left + right, expected, rtol=1e-10, atol=0))
        self.assertTrue(np.allclose(E, np.exp(-h * k2), rtol=1e-14, atol=0))

    def test_constant_force_matches_closed_form(self):
        grid = GridSpec(2, 32, 16.0)
        tensor = np.zeros((2, 2) + grid.shape)
        tensor[0, 1] = np.exp(-grid.radius ** 2)
        duration = 0.5
        forcing = SeparableForcing(grid, tensor, lambda t: 1.0, duration, duration)
        tg = TimeGrid.uniform(1.0, 8)
        series = duhamel_series(forcing, tg)

        direction = kernel_F_hat(grid, grid.forward(tensor), 0.0)
        k2 = grid.k_squared
        safe = np.where(k2 > 0, k2, 1.0)
        for i, t in enumerate(tg.nodes):
            end = min(t, duration)
            factor = np.where(k2 > 0, (np.exp(-(t - end) * k2) - np.exp(-t * k2)) / safe, end)
            expected = direction * factor
            scale = max(float(np.max(np.abs(expected))), 1e-300)
            self.assertLessEqual(float(np.max(np.abs(series[i] - expected))) / scale if i else
                                 float(np.max(np.abs(series[i]))), 1e-9)

    def test_duhamel_force_trajectory(self):
        grid = GridSpec(2, 32, 16.0)
        tensor = np.zeros((2, 2) + grid.shape)
        tensor[1, 0] = np.exp(-grid.radius ** 2)
        forcing = SeparableForcing(grid, tensor, lambda t: 2.0 * t, 0.5, 0.25)
        tg = TimeGrid.uniform(1.0, 4)
        tr = duhamel_force(forcing, tg)
        self.assertTrue(np.array_equal(tr.spectra, duhamel_series(forcing, tg)))
        self.assertAlmostEqual(float(tr.l2[0]), 0.0, places=12)
        self.assertGreater(tr.l2[-1], 0.0)

    def test_force_support_checks(self):
        grid = GridSpec(2, 32, 16.0)
        tensor = np.zeros((2, 2) + grid.shape)
        tensor[0, 1] = np.exp(-grid.radius ** 2)
        with self.assertRaises(ValueError):
            duhamel_series(SeparableForcing(grid, tensor, lambda t: 1.0, 2.0), TimeGrid.uniform(1.0, 4))
        with self.assertRaises(ResolutionError):
            duhamel_series(SeparableForcing(grid, tensor, lambda t: 1.0, 0.5), TimeGrid.uniform(1.0, 4), substep=0.25)


class TestPicard(unittest.TestCase):
    def setUp(self):
        self.grid = GridSpec(2, 32, 16.0)
        self.timegrid = TimeGrid.uniform(1.0, 64)

    def test_zero_data(self):
        a = VectorField.zeros(self.grid)
        tr, history = picard_iterate(a, None, self.timegrid)
        self.assertEqual(history, [0.0])
        self.assertFalse(np.any(tr.spectra))

    def test_vortex_agrees_with_integrator(self):
        a = generate_data(self.grid, "gaussian_vortex", amplitude=0.01, width=2.0)
        picard, history = picard_iterate(a, None, self.timegrid)
        marched = integrate(a, None, self.timegrid)
        difference = np.max(np.abs(picard.l2 - marched.l2) / picard.l2)
        self.assertLessEqual(float(difference), 1e-6)
        self.assertLessEqual(picard.max_divergence(), 1e-12)

    def test_moment_free_agrees_with_integrator(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)
        picard, history = picard_iterate(a, None, self.timegrid)
        marched = integrate(a, None, self.timegrid)
        for i in range(1, len(self.timegrid.nodes)):
            diff = self.grid.inverse(picard.spectra[i] - marched.spectra[i])
            self.assertLessEqual(float(np.sqrt(np.sum(diff ** 2)) * self.grid.dx) / picard.l2[i], 1e-4)
        self.assertTrue(all(r <= 0.5 for r in contraction_ratios(history)))

    def test_fixed_point_identity(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)
        tg = TimeGrid.uniform(1.0, 16)
        tr, _ = picard_iterate(a, None, tg)
        a_hat = a.spectral().data
        for i in (4, 16):
            t = float(tg.nodes[i])
            nonlinear = tr.spectra[i] - heat_hat(self.grid, a_hat, t)
            rebuilt = heat_hat(self.grid, a_hat, t) + bilinear_G(tr, tr, t).data
            self.assertGreater(float(np.max(np.abs(nonlinear))), 0.0)
            self.assertLessEqual(float(np.max(np.abs(tr.spectra[i] - rebuilt))),
                                 1e-4 * float(np.max(np.abs(nonlinear))))

    def test_nonlinear_part_independent_of_node_spacing(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)
        parts = []
        for steps in (8, 16):
            tg = TimeGrid.uniform(1.0, steps)
            tr, _ = picard_iterate(a, None, tg)
            parts.append(tr.spectra - integrate(a, None, tg, nonlinear=False).spectra)
        coarse, fine = parts[0], parts[1][::2]
        scale = float(np.max(np.abs(fine)))
        self.assertGreater(scale, 0.0)
        self.assertLessEqual(float(np.max(np.abs(coarse - fine))), 1e-3 * scale)

    def test_nonlinear_part_scales_quadratically(self):
        tg = TimeGrid.uniform(1.0, 16)
        peaks = []
        for amplitude in (0.01, 0.02):
            a = generate_data(self.grid, "moment_free", amplitude=amplitude, width=2.0, skew=0.5)
            tr, _ = picard_iterate(a, None, tg)
            peaks.append(float(np.max((tr - integrate(a, None, tg, nonlinear=False)).l2)))
        self.assertGreater(peaks[0], 0.0)
        self.assertAlmostEqual(peaks[1] / peaks[0], 4.0, delta=0.2)

    def test_bilinear_series_is_bilinear(self):
        tg = TimeGrid.uniform(1.0, 8)
        nodes = tg.nodes
        U = integrate(generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5), None, tg,
                      nonlinear=False).spectra
        V = integrate(generate_data(self.grid, "gaussian_vortex", amplitude=0.01, width=2.5), None, tg,
                      nonlinear=False).spectra
        W = integrate(generate_data(self.grid, "random_solenoidal", amplitude=0.01, width=2.0, seed=3), None, tg,
                      nonlinear=False).spectra
        substeps = bilinear_substeps(self.grid, nodes, U, V)
        self.assertEqual(len(substeps), len(nodes) - 1)

        def G(x, y):
            return bilinear_series(self.grid, nodes, x, y, substeps)

        base = G(U, V)
        scale = float(np.max(np.abs(base)))
        self.assertGreater(scale, 0.0)
        self.assertLessEqual(float(np.max(np.abs(G(U + 2 * W, V) - (base + 2 * G(W, V))))), 1e-9 * scale)
        self.assertLessEqual(float(np.max(np.abs(G(U, V - 3 * W) - (base - 3 * G(U, W))))), 1e-9 * scale)

    def test_large_data_does_not_contract(self):
        a = generate_data(self.grid, "moment_free", amplitude=50.0, width=2.0, skew=0.5)
        with self.assertRaises(SmallnessViolation) as ctx:
            picard_iterate(a, None, TimeGrid.uniform(1.0, 8), PicardConfig(max_iterations=20))
        self.assertGreater(len(ctx.exception.differences), 0)
        self.assertEqual(len(ctx.exception.ratios), len(ctx.exception.differences) - 1)

    def test_small_data_reports(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)
        tr, _ = picard_iterate(a, None, TimeGrid.geometric(4.0, 1e-2, 1.5))
        self.assertLessEqual(energy_bound_check(tr, a), 1.0)
        report = kato_norms(tr, a)
        self.assertIn(4.0, report.x_p_norms)
        self.assertIn(math.inf, report.x_p_norms)
        self.assertGreater(report.energy_integral, 0.0)
        kappa = measure_bilinear_constant(tr)
        self.assertTrue(math.isfinite(kappa))
        self.assertGreater(kappa, 0.0)


class TestIntegrate(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.grid = GridSpec(2, 32, 16.0)
        self.a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_linear_run_is_heat_flow(self):
        tg = TimeGrid.geometric(4.0, 1e-2, 1.5)
        tr = integrate(self.a, None, tg, nonlinear=False)
        a_hat = self.a.spectral().data
        for i, t in enumerate(tg.nodes):
            expected = heat_hat(self.grid, a_hat, float(t))
            self.assertLessEqual(float(np.max(np.abs(tr.spectra[i] - expected))), 1e-12 * float(np.max(np.abs(a_hat))))

    def test_step_limit(self):
        a = generate_data(self.grid, "moment_free", amplitude=100.0, width=2.0, skew=0.5)
        with self.assertRaises(ResolutionError):
            integrate(a, None, TimeGrid.uniform(1.0, 1))

    def test_checkpoint_resume(self):
        path = os.path.join(self.temp_dir, "ckpt")
        tg = TimeGrid.uniform(0.5, 8)
        first = integrate(self.a, None, tg, checkpoint=path)
        second = integrate(self.a, None, tg, checkpoint=path)
        self.assertTrue(np.array_equal(first.spectra, second.spectra))
        with self.assertRaises(ValueError):
            integrate(self.a, None, TimeGrid.uniform(0.5, 4), checkpoint=path)

    def test_energy_never_increases(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.05, width=2.0, skew=0.5)
        tr = integrate(a, None, TimeGrid.geometric(8.0, 1e-2, 1.3))
        self.assertLess(tr.l2[-1], tr.l2[0])
        self.assertTrue(np.all(np.diff(tr.l2) <= 1e-12 * tr.l2[0]))

    def test_trajectory_difference(self):
        tg = TimeGrid.uniform(0.5, 4)
        tr = integrate(self.a, None, tg)
        zero = tr - tr
        self.assertIsInstance(zero, Trajectory)
        self.assertFalse(np.any(zero.l2))


class TestKatoNorms(unittest.TestCase):
    grid = GridSpec(2, 128, 32.0)

    def test_vortex_heat_flow_values(self):
        # |u(t)| peaks at r^2 = (w^2 + 4t)/2; t^{1/2} ||u||_inf peaks at t = w^2/8
        A = 0.1
        a = generate_data(self.grid, "gaussian_vortex", amplitude=A, width=2.0)
        tr = integrate(a, None, TimeGrid.uniform(4.0, 64), nonlinear=False)
        report = kato_norms(tr)
        self.assertAlmostEqual(report.x_p_norms[2.0], math.sqrt(math.pi) * A, places=8)
        expected = A * math.sqrt(2) * math.exp(-0.5) / (math.sqrt(8) * 1.5 ** 1.5)
        self.assertAlmostEqual(expected / A, 0.16508, places=5)
        self.assertGreaterEqual(report.x_p_norms[math.inf], 0.97 * expected)
        self.assertLessEqual(report.x_p_norms[math.inf], (1 + 1e-6) * expected)

    def test_rescaled_data_has_same_norms(self):
        a = generate_data(self.grid, "moment_free", amplitude=0.1, width=2.0, skew=0.5)
        tg = TimeGrid.uniform(4.0, 64)
        original = kato_norms(integrate(a, None, tg, nonlinear=False))
        rescaled = kato_norms(integrate(lambda_rescale(a, 2.0), None, tg.scaled(0.25), nonlinear=False))
        for p in (2.0, 4.0):
            self.assertAlmostEqual(rescaled.x_p_norms[p] / original.x_p_norms[p], 1.0, delta=1e-6)


if __name__ == '__main__':
    unittest.main()
