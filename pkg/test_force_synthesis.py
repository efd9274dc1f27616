import json
import math
import os
import shutil
import tempfile
import unittest

import cbor2
import numpy as np
from hypothesis import given, settings, strategies as st

from diagnostics import force_symmetry, ms_residual
from fieldio import read_field
from force_synthesis import (BoxTooSmallError, DegenerateProfileError, InsufficientHorizonError, MomentMatrix,
                             ProfileForcing, asymmetric_profile, build_force, check_smallness, choose_R, choose_t_cut,
                             default_profile, export_force, flux_integral, functionals, lambda_rescale,
                             load_calibration, moment_matrix, normalize_profile, profile_from_samples, synthesize,
                             unscale_trajectory)
from initial_data import generate_data
from mild_solver import SmallnessViolation, TimeGrid, Trajectory, integrate
from spectral_core import GridSpec, ResolutionError, TensorField, VectorField, norms_and_moments


class TestForceProfile(unittest.TestCase):
    def test_unit_integral(self):
        profile = default_profile(2)
        self.assertAlmostEqual(profile.integral(), 1.0, places=12)
        self.assertAlmostEqual(profile.with_radius(4.0).integral(), 1.0, places=12)
        self.assertAlmostEqual(asymmetric_profile(2).integral(), 1.0, places=12)

    def test_norms_scale_with_radius(self):
        profile = default_profile(2)
        R = 4.0
        for p in (1.0, 2.0, 4.0, math.inf):
            expected = profile.norm_series(p) * R ** (-2 * (1 - 1 / p))
            self.assertTrue(np.allclose(profile.with_radius(R).norm_series(p), expected, rtol=1e-12, atol=0))

    def test_antisymmetric_profile_is_degenerate(self):
        y = np.linspace(-1.0, 1.0, 33)
        y1, y2 = np.meshgrid(y, y, indexing="ij")
        times = np.linspace(0.0, 1.0, 3)
        samples = np.stack([y1 * np.exp(-(y1 ** 2 + y2 ** 2))] * 3)
        with self.assertRaises(DegenerateProfileError):
            normalize_profile(samples, times, 1.0)

    def test_rejects_bad_lattices(self):
        with self.assertRaises(ValueError):
            normalize_profile(np.ones((3, 5)), np.linspace(0, 1, 3), 1.0)
        with self.assertRaises(ValueError):
            normalize_profile(np.ones((3, 5, 5)), np.array([0.0, 0.5, 0.4]), 1.0)

    def test_samples_from_file(self):
        temp_dir = tempfile.mkdtemp()
        try:
            path = os.path.join(temp_dir, "bump.npz")
            profile = default_profile(2)
            np.savez(path, samples=profile.samples * 3.0, times=profile.times, half_width=1.0)
            loaded = profile_from_samples(path)
            self.assertEqual(loaded.name, "bump.npz")
            self.assertAlmostEqual(loaded.integral(), 1.0, places=12)
            self.assertTrue(np.allclose(loaded.samples, profile.samples, rtol=1e-12))
            with self.assertRaises(FileNotFoundError):
                profile_from_samples(os.path.join(temp_dir, "absent.npz"))
        finally:
            shutil.rmtree(temp_dir)


class TestProfileForcing(unittest.TestCase):
    grid = GridSpec(2, 128, 32.0)
    profile = default_profile(2)

    def test_discrete_integral_is_one(self):
        force = ProfileForcing.from_profile(self.grid, np.eye(2), self.profile)
        self.assertAlmostEqual(force.phi_integral(), 1.0, places=12)
        self.assertTrue(np.allclose(force.integral(), np.eye(2), rtol=1e-12))
        force.check_resolution()

    def test_profile_must_fit(self):
        with self.assertRaises(BoxTooSmallError) as ctx:
            self.profile.with_radius(16.0).check_fits(self.grid)
        self.assertGreater(ctx.exception.needed_length, self.grid.box_length)
        with self.assertRaises(ResolutionError):
            self.profile.check_fits(GridSpec(2, 16, 32.0))
        with self.assertRaises(ValueError):
            default_profile(3, points=9, time_points=5).on_grid(self.grid)

    def test_build_force_removes_the_trace(self):
        c = MomentMatrix(np.array([[2.0, 0.5], [0.5, 1.0]]), 1.0)
        force = build_force(c, self.profile, self.grid)
        self.assertTrue(np.array_equal(force.coefficients, np.array([[-1.0, 0.5], [0.5, -2.0]])))
        report = ms_residual(c, force)
        self.assertAlmostEqual(report.scalar_part, 3.0, places=10)
        self.assertTrue(report.passed)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_balance_is_scalar(self, c11, c12, c22):
        c = MomentMatrix(np.array([[c11, c12], [c12, c22]]), 1.0)
        report = ms_residual(c, build_force(c, self.profile, self.grid))
        self.assertLessEqual(report.deviation, 1e-10 * (1 + c.frobenius))
        self.assertAlmostEqual(report.scalar_part, c11 + c22, delta=1e-10 * (1 + c.frobenius))

    def test_symmetric_force(self):
        c = MomentMatrix(np.array([[0.3, -0.2], [-0.2, 0.1]]), 1.0)
        self.assertEqual(force_symmetry(build_force(c, self.profile, self.grid)), 0.0)

    def test_rescaled_force(self):
        force = ProfileForcing.from_profile(self.grid, np.eye(2), self.profile)
        big = force.rescaled(2.0)
        self.assertEqual(big.grid.box_length, 64.0)
        self.assertEqual(big.support, (0.0, 4 * self.profile.time_extent))
        self.assertAlmostEqual(big.phi_integral(), 4.0, places=10)

    def test_export(self):
        temp_dir = tempfile.mkdtemp()
        try:
            force = ProfileForcing.from_profile(self.grid, np.eye(2), self.profile)
            paths = export_force(force, temp_dir)
            self.assertEqual(len(paths), len(self.profile.times))
            field, metadata = read_field(paths[5])
            self.assertIsInstance(field, TensorField)
            self.assertEqual(metadata["time"], float(self.profile.times[5]))
            self.assertTrue(np.allclose(field.data, force.tensor_field(metadata["time"]).data))
        finally:
            shutil.rmtree(temp_dir)


class TestLambdaRescale(unittest.TestCase):
    def setUp(self):
        self.grid = GridSpec(2, 128, 32.0)
        self.a = generate_data(self.grid, "gaussian_vortex", amplitude=1.0, width=2.0)

    def test_norm_identities(self):
        lam = 2.0
        b = lambda_rescale(self.a, lam)
        before = norms_and_moments(self.a, (2, 4))
        after = norms_and_moments(b, (2, 4))
        self.assertAlmostEqual(after.lp_values[2.0] / before.lp_values[2.0], 1.0, places=8)
        self.assertAlmostEqual(after.lp_values[4.0] / before.lp_values[4.0], math.sqrt(lam), places=8)
        self.assertAlmostEqual(after.weighted_first_moment / before.weighted_first_moment, lam ** -2, places=8)

    def test_functionals_scale(self):
        lam, n = 2.0, 2
        calibration = load_calibration(n)
        wide = generate_data(GridSpec(2, 128, 64.0), "gaussian_vortex", amplitude=1.0, width=2.0)
        reference = functionals(wide, calibration)
        rescaled = functionals(lambda_rescale(self.a, lam), calibration)
        self.assertLess(abs(lam ** (n - 0.5) * rescaled.J / reference.J - 1), 1e-6)
        self.assertLess(abs(lam ** n * rescaled.K / reference.K - 1), 1e-6)

    def test_fractional_lambda(self):
        b = lambda_rescale(self.a, 0.5)
        ratio = norms_and_moments(b, (2,)).lp_values[2.0] / norms_and_moments(self.a, (2,)).lp_values[2.0]
        self.assertAlmostEqual(ratio, 1.0, places=6)

    def test_invalid_lambda(self):
        self.assertIs(lambda_rescale(self.a, 1.0), self.a)
        with self.assertRaises(ValueError):
            lambda_rescale(self.a, 0.0)
        with self.assertRaises(ValueError):
            lambda_rescale(self.a, 0.3)
        with self.assertRaises(ResolutionError):
            lambda_rescale(self.a, 8.0)


class TestSmallness(unittest.TestCase):
    grid = GridSpec(2, 128, 32.0)

    def test_zero_data_passes(self):
        report = check_smallness(VectorField.zeros(self.grid), default_profile(2))
        self.assertTrue(report.passed)
        self.assertEqual(set(report.conditions), {"S", "S_prime", "A1", "A2", "A3", "A4", "A5", "A6"})
        json.dumps(report.to_dict())

    def test_choose_R_meets_margins(self):
        a = generate_data(self.grid, "gaussian_vortex", amplitude=0.05)
        profile, report = choose_R(a, default_profile(2))
        self.assertIn(profile.radius, (1.0, 2.0, 4.0, 8.0))
        for name, condition in report.profile_conditions().items():
            self.assertGreaterEqual(condition.margin, 0.1, name)
        profile.check_fits(self.grid)

    def test_choose_R_reports_finite_box(self):
        a = generate_data(self.grid, "gaussian_vortex", amplitude=50.0)
        with self.assertRaises(BoxTooSmallError) as ctx:
            choose_R(a, default_profile(2))
        # R = 8 is the last radius whose support clears the edge band of a 128 point box of length 32
        self.assertAlmostEqual(ctx.exception.needed_length, 32.0 / (1 - 16.0 / 128), places=10)
        self.assertGreater(ctx.exception.needed_length, self.grid.box_length)

    def test_rescaling_restores_s_prime(self):
        # J = A w^{3/2}(5.915 + 16.79 A) for the vortex; the rescale by 2 divides J by 2^{3/2}
        a = generate_data(GridSpec(2, 128, 64.0), "gaussian_vortex", amplitude=0.1, width=4.0)
        before = check_smallness(a, default_profile(2))
        after = check_smallness(lambda_rescale(a, 2.0), default_profile(2))
        self.assertAlmostEqual(before.conditions["S_prime"].lhs, 1.215, delta=0.005)
        self.assertAlmostEqual(after.conditions["S_prime"].lhs, 0.794, delta=0.005)
        self.assertFalse(before.conditions["S_prime"].passed)
        self.assertTrue(after.conditions["S_prime"].passed)
        for report in (before, after):
            self.assertAlmostEqual(report.conditions["S"].lhs, math.sqrt(math.pi) * 0.1, places=6)
            self.assertTrue(report.conditions["S"].passed)

    def test_large_data_fails(self):
        a = generate_data(self.grid, "gaussian_vortex", amplitude=50.0)
        report = check_smallness(a, default_profile(2))
        self.assertFalse(report.passed)
        self.assertFalse(report.conditions["S"].passed)


class TestMomentMatrix(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        grid = GridSpec(2, 32, 16.0)
        a = generate_data(grid, "gaussian_vortex", amplitude=0.05, width=2.0)
        cls.tr = integrate(a, None, TimeGrid.geometric(4.0, 1e-2, 1.3))

    def test_positive_semidefinite(self):
        c = moment_matrix(self.tr, 4.0, horizon_tolerance=0.5)
        self.assertTrue(np.array_equal(c.entries, c.entries.T))
        self.assertGreaterEqual(c.min_eigenvalue(), 0.0)
        self.assertAlmostEqual(c.trace, float(self.tr.energy_integral[-1]), places=12)
        self.assertTrue(np.allclose(flux_integral(self.tr)[-1], c.entries, rtol=1e-12))

    def test_constant_flow(self):
        grid = GridSpec(2, 32, 16.0)
        u = generate_data(grid, "random_solenoidal", amplitude=0.05, width=2.0, seed=7)
        timegrid = TimeGrid.uniform(2.0, 8)
        spectra = np.repeat(u.spectral().data[np.newaxis], len(timegrid.nodes), axis=0)
        tr = Trajectory(grid, timegrid, spectra)
        values = u.physical().data
        flux = np.einsum("i...,j...->ij", values, values) * grid.cell_volume
        self.assertGreater(abs(flux[0, 1]), 0.0)
        c = moment_matrix(tr, 2.0, horizon_tolerance=10.0)
        self.assertEqual(c.t_cut, 2.0)
        self.assertTrue(np.allclose(c.entries, 2.0 * flux, rtol=1e-10, atol=0))
        # ||u||_2 t^{(n+2)/4} peaks at t_cut, so the tail bound is 2 ||u||_2^2
        self.assertAlmostEqual(c.tail_bound / (2 * tr.l2[0] ** 2), 1.0, places=10)

    def test_horizon(self):
        with self.assertRaises(InsufficientHorizonError) as ctx:
            moment_matrix(self.tr, 4.0, horizon_tolerance=0.01)
        self.assertGreater(ctx.exception.tail_bound, 0.01 * ctx.exception.norm)
        with self.assertRaises(InsufficientHorizonError):
            moment_matrix(self.tr, 8.0, horizon_tolerance=0.5)

    def test_t_cut_is_a_node(self):
        t_cut = choose_t_cut(self.tr, 0.5)
        self.assertIn(t_cut, list(self.tr.times))
        self.assertLessEqual(t_cut, 4.0)

    def test_unscaled_energy(self):
        lam = 2.0
        unscaled = unscale_trajectory(self.tr, lam)
        self.assertEqual(unscaled.grid.box_length, 32.0)
        self.assertTrue(np.allclose(unscaled.times, self.tr.times * lam ** 2, rtol=1e-12))
        self.assertTrue(np.allclose(unscaled.l2, self.tr.l2, rtol=1e-12))


class TestSynthesize(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.grid = GridSpec(2, 64, 32.0)
        self.a = generate_data(self.grid, "moment_free", amplitude=0.01, width=2.0, skew=0.5)
        self.timegrid = TimeGrid.geometric(16.0, 1e-3, 1.3)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_converges_to_scalar_balance(self):
        checkpoint = os.path.join(self.temp_dir, "synthesis.cbor")
        state = synthesize(self.a, default_profile(2), self.timegrid, solver="integrate", horizon_tolerance=0.5,
                           acknowledge_smallness=True, checkpoint=checkpoint)
        self.assertTrue(state.converged)
        self.assertGreaterEqual(state.m, 1)
        self.assertTrue(ms_residual(state.final, state.force).passed)
        self.assertEqual(force_symmetry(state.force), 0.0)
        json.dumps(state.to_dict())

        with open(checkpoint, "rb") as f:
            self.assertEqual(cbor2.load(f)["m"], state.m)
        resumed = synthesize(self.a, default_profile(2), self.timegrid, solver="integrate", horizon_tolerance=0.5,
                             acknowledge_smallness=True, checkpoint=checkpoint)
        self.assertTrue(resumed.converged)
        self.assertEqual(resumed.m, state.m + 1)

    def test_resume_matches_uninterrupted_run(self):
        options = dict(solver="integrate", horizon_tolerance=0.5, acknowledge_smallness=True, tol=0.0)
        whole = synthesize(self.a, default_profile(2), self.timegrid, max_outer=3, **options)
        checkpoint = os.path.join(self.temp_dir, "synthesis.cbor")
        synthesize(self.a, default_profile(2), self.timegrid, max_outer=2, checkpoint=checkpoint, **options)
        resumed = synthesize(self.a, default_profile(2), self.timegrid, max_outer=3, checkpoint=checkpoint, **options)
        self.assertEqual(resumed.m, 3)
        self.assertEqual(len(resumed.y_differences), 3)
        self.assertGreater(resumed.y_differences[-1], 0.0)
        self.assertTrue(np.allclose(resumed.y_differences, whole.y_differences, rtol=1e-6, atol=0))
        self.assertTrue(np.allclose(resumed.differences, whole.differences, rtol=1e-6, atol=0))

    def test_outer_iteration_contracts(self):
        state = synthesize(self.a, default_profile(2), self.timegrid, tol=0.0, max_outer=3, solver="integrate",
                           horizon_tolerance=0.5, acknowledge_smallness=True)
        self.assertEqual(len(state.ratios), 2)
        self.assertTrue(all(0 < r <= 0.9 for r in state.ratios))
        self.assertTrue(state.contracting)

    def test_asymmetric_profile(self):
        state = synthesize(self.a, asymmetric_profile(2), self.timegrid, solver="integrate", horizon_tolerance=0.5,
                           acknowledge_smallness=True)
        self.assertTrue(state.converged)
        self.assertTrue(ms_residual(state.final, state.force).passed)

    def test_refuses_large_data(self):
        a = generate_data(self.grid, "moment_free", amplitude=50.0, width=2.0, skew=0.5)
        with self.assertRaises(SmallnessViolation):
            synthesize(a, default_profile(2), self.timegrid, solver="integrate")


if __name__ == '__main__':
    unittest.main()
