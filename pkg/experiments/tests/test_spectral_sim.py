import json
import math
import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from experiments import lp_besov, spectral_sim
from experiments.errors import ConstraintError, GridError
from experiments.linsymbol import FluidParams, PressureLaw
from experiments.lp_besov import SpectralField, TorusGrid
from experiments.spectral_sim import DataRecipe, Formulation, StepperConfig


def params(Omega=10.0, eps=0.1):
    return FluidParams.from_mu(1.0, Omega, eps)


def bump(grid, amplitude=0.05, p=None):
    return spectral_sim.make_initial_data(DataRecipe("gaussian-bump", amplitude), grid, p or params())


def _relative_l2(first, second):
    return float(np.linalg.norm(first - second) / np.linalg.norm(second))


class ProductTests(SimpleTestCase):
    def test_dealiased_product_matches_direct_convolution(self):
        grid = TorusGrid(8)
        rng = np.random.default_rng(0)
        mask = spectral_sim.dealias_mask(grid)
        f = SpectralField.from_physical(grid, rng.normal(size=grid.shape)).masked(mask)
        g = SpectralField.from_physical(grid, rng.normal(size=grid.shape)).masked(mask)
        assert_allclose(
            spectral_sim.pseudospectral_product(f, g).coeffs,
            spectral_sim.convolution_oracle(f, g).coeffs,
            atol=1e-12,
        )

    def test_dealias_mask_keeps_two_thirds(self):
        mask = spectral_sim.dealias_mask(TorusGrid(12))
        kx, _, _ = TorusGrid(12).integer_modes
        self.assertFalse(mask[np.abs(kx[:, 0, 0]) > 4].any())
        self.assertTrue(mask[0, 0, 0])


class PressureFunctionTests(SimpleTestCase):
    def setUp(self):
        self.fns = spectral_sim.pressure_functions(PressureLaw(gamma=1.4))

    def test_values_at_zero(self):
        self.assertAlmostEqual(float(self.fns.K(0.0)), 0.0)
        self.assertAlmostEqual(float(self.fns.G(0.0)), 0.0)
        self.assertAlmostEqual(float(self.fns.Q(0.0)), 0.2)
        self.assertAlmostEqual(float(self.fns.H(0.0)), 0.0)

    def test_G_is_antiderivative_of_K(self):
        a = np.linspace(-0.5, 0.5, 11)
        h = 1e-6
        derivative = (self.fns.G(a + h) - self.fns.G(a - h)) / (2 * h)
        assert_allclose(derivative, self.fns.K(a), atol=1e-8)

    def test_series_branches_are_continuous(self):
        cut = spectral_sim.SERIES_CUTOFF
        for fn in (self.fns.Q, self.fns.H):
            inside, outside = float(fn(0.999 * cut)), float(fn(1.001 * cut))
            self.assertAlmostEqual(inside, outside, delta=1e-6)

    def test_custom_law_matches_gamma_law(self):
        g = 1.4
        custom = spectral_sim.pressure_functions(
            PressureLaw(gamma=None, P=lambda r: r**g / g, dP=lambda r: r ** (g - 1), d2P=lambda r: (g - 1) * r ** (g - 2))
        )
        a = np.array([-0.3, 0.2, 0.4])
        assert_allclose(custom.K(a), self.fns.K(a), rtol=1e-12)
        assert_allclose(custom.G(a), self.fns.G(a), rtol=1e-10)


class StateTests(SimpleTestCase):
    def test_state_shape_is_checked(self):
        grid = TorusGrid(8)
        with self.assertRaises(GridError):
            spectral_sim.State(grid, np.zeros((3,) + grid.spectral_shape))

    def test_stepper_config_checks(self):
        with self.assertRaises(ConstraintError):
            StepperConfig(dt=0.01, scheme=3)
        with self.assertRaises(ConstraintError):
            StepperConfig(dt=0.0)
        with self.assertRaises(ConstraintError):
            StepperConfig(dt=0.01, positivity_floor=1.0)

    def test_second_order_scheme_time_step_limit(self):
        grid = TorusGrid(16)
        with self.assertRaises(ConstraintError):
            spectral_sim.check_time_step(grid, params(), StepperConfig(dt=0.1, scheme=2))
        spectral_sim.check_time_step(grid, params(), StepperConfig(dt=0.1, scheme=4))

    def test_momentum_conversion(self):
        grid = TorusGrid(16)
        p = params()
        state = bump(grid)
        momentum = spectral_sim.convert(state, p, "m")
        self.assertIs(momentum.formulation, Formulation.MOMENTUM)
        self.assertIs(spectral_sim.convert(momentum, p, Formulation.MOMENTUM), momentum)
        back = spectral_sim.convert(momentum, p, "u")
        assert_allclose(back.coeffs[0], state.coeffs[0], rtol=0, atol=0)
        self.assertLessEqual(_relative_l2(back.coeffs, state.coeffs), 1e-11)

    def test_round_trip_on_random_data(self):
        grid, p = TorusGrid(32), params(eps=0.5)
        for recipe in (DataRecipe("random-band", 0.1, seed=4), DataRecipe("gaussian-bump", 0.3)):
            state = spectral_sim.make_initial_data(recipe, grid, p)
            back = spectral_sim.convert(spectral_sim.convert(state, p, "m"), p, "u")
            self.assertLessEqual(_relative_l2(back.coeffs, state.coeffs), 1e-11, recipe.name)

    def test_momentum_equals_velocity_without_density_perturbation(self):
        grid = TorusGrid(16)
        state = bump(grid)
        still = spectral_sim.State(grid, np.concatenate([np.zeros_like(state.coeffs[:1]), state.coeffs[1:]]))
        assert_allclose(spectral_sim.convert(still, params(), "m").coeffs, still.coeffs, rtol=0, atol=0)


class InitialDataTests(SimpleTestCase):
    def test_random_band_scaled_to_amplitude(self):
        grid = TorusGrid(32)
        state = spectral_sim.make_initial_data(DataRecipe("random-band", 0.2, seed=3), grid, params())
        self.assertAlmostEqual(lp_besov.lp_norm(lp_besov.inverse(state.coeffs, grid.n), 2), 0.2, places=12)
        self.assertAlmostEqual(state.mean_a(), 0.0)

    def test_same_seed_same_data(self):
        grid = TorusGrid(32)
        first = spectral_sim.make_initial_data(DataRecipe("random-band", 0.1, seed=9), grid, params())
        second = spectral_sim.make_initial_data(DataRecipe("random-band", 0.1, seed=9), grid, params())
        assert_allclose(first.coeffs, second.coeffs, rtol=0, atol=0)

    def test_random_band_needs_three_bands(self):
        with self.assertRaises(GridError):
            spectral_sim.make_initial_data(DataRecipe("random-band", 0.1), TorusGrid(16), params())

    def test_single_mode_must_be_retained(self):
        with self.assertRaises(GridError):
            spectral_sim.make_initial_data(DataRecipe("single-mode", 0.1, band=4), TorusGrid(16), params())
        state = spectral_sim.make_initial_data(DataRecipe("single-mode", 0.1, band=2), TorusGrid(16), params())
        self.assertAlmostEqual(float(lp_besov.inverse(state.coeffs[0], 16).max()), 0.1, places=12)

    def test_density_floor(self):
        with self.assertRaises(GridError):
            spectral_sim.make_initial_data(DataRecipe("single-mode", 12.0, band=1), TorusGrid(16), params(eps=0.1))

    def test_unknown_recipe(self):
        with self.assertRaises(ConstraintError):
            DataRecipe("vortex-ring")


class SimulateTests(SimpleTestCase):
    def test_linear_run_matches_exact_solution(self):
        grid = TorusGrid(16)
        p = params()
        state = bump(grid)
        cfg = StepperConfig(dt=0.01, scheme=4, nonlinear=False, snapshot_every=5)
        run = spectral_sim.simulate(state, p, cfg, 0.1)
        exact = spectral_sim.linear_exact_solution(spectral_sim.dealias_state(state), p, 0.1)
        assert_allclose(run.final.coeffs, exact.coeffs, atol=1e-10)
        assert_allclose(run.times, [0.0, 0.05, 0.1])

    def test_nonlinear_run_conserves_mean_density(self):
        grid = TorusGrid(16)
        run = spectral_sim.simulate(bump(grid), params(), StepperConfig(dt=0.01, scheme=4, snapshot_every=10), 0.2)
        self.assertTrue(run.report.stable)
        self.assertEqual(run.report.steps, 20)
        self.assertLess(run.report.mean_drift, 1e-13)
        self.assertGreater(run.report.min_margin, 0.5)

    def test_momentum_run_tracks_velocity_run(self):
        grid = TorusGrid(32)
        p = params(Omega=2.0, eps=0.5)
        state = bump(grid, 0.05, p)
        cfg = StepperConfig(dt=0.0025, scheme=4, snapshot_every=40)
        velocity = spectral_sim.simulate(state, p, cfg, 0.1)
        momentum = spectral_sim.simulate(spectral_sim.convert(state, p, "m"), p, cfg, 0.1)
        linear = spectral_sim.linear_exact_solution(state, p, 0.1)
        au_vel = velocity.field_series("au").snapshots[-1].coeffs
        au_mom = momentum.field_series("au").snapshots[-1].coeffs
        nonlinear_effect = float(np.linalg.norm(au_vel - linear.coeffs))
        self.assertGreater(nonlinear_effect, 1e-8)
        # the formulations differ only by what the 2/3 filter drops from their products
        self.assertLess(float(np.linalg.norm(au_vel - au_mom)), 1e-2 * nonlinear_effect)

    def test_snapshot_callback_and_until(self):
        grid = TorusGrid(16)
        seen = []
        run = spectral_sim.simulate(
            bump(grid), params(), StepperConfig(dt=0.01, scheme=4, snapshot_every=2), 0.1,
            on_snapshot=lambda t, s: seen.append(t),
        )
        self.assertEqual(seen, list(run.times))
        self.assertEqual(len(run.until(0.04).times), 3)
        with self.assertRaises(ConstraintError):
            run.field_series("rho")

    def test_horizon_must_be_positive(self):
        with self.assertRaises(ConstraintError):
            spectral_sim.simulate(bump(TorusGrid(16)), params(), StepperConfig(dt=0.01), 0.0)


class SnapshotFileTests(SimpleTestCase):
    def test_written_snapshot_reads_back(self):
        grid = TorusGrid(8)
        p = params()
        state = bump(grid)
        with tempfile.TemporaryDirectory() as tmp:
            path = spectral_sim.write_snapshot(Path(tmp) / "s.bin", state, 0.25, p, "f" * 64)
            snap = spectral_sim.read_snapshot(path)
        assert_allclose(snap.state.coeffs, state.coeffs, rtol=0, atol=0)
        self.assertEqual(snap.t, 0.25)
        self.assertEqual(snap.config_hash, "f" * 64)
        self.assertEqual(snap.params["gamma"], 1.4)

    def test_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "junk.bin"
            path.write_bytes(b"not a snapshot")
            with self.assertRaises(ConstraintError):
                spectral_sim.read_snapshot(path)

    def test_writer_builds_manifest(self):
        grid = TorusGrid(16)
        with tempfile.TemporaryDirectory() as tmp:
            writer = spectral_sim.SnapshotWriter(Path(tmp), params(), "abc")
            spectral_sim.simulate(bump(grid), params(), StepperConfig(dt=0.01, scheme=4, snapshot_every=5), 0.1, on_snapshot=writer)
            manifest = json.loads(writer.finish({"kind": "simulate"}).read_text())
            self.assertTrue((Path(tmp) / "snapshots" / "snap_00002.bin").exists())
        self.assertEqual(manifest["kind"], "simulate")
        self.assertEqual([entry["index"] for entry in manifest["snapshots"]], [0, 1, 2])
        self.assertTrue(math.isclose(manifest["snapshots"][-1]["t"], 0.1))


class ConvergenceTests(SimpleTestCase):
    def setUp(self):
        self.grid = TorusGrid(16)
        self.params = params(Omega=2.0, eps=0.5)
        self.state = bump(self.grid, 0.05, self.params)

    def test_nonlinear_correction_is_quadratic(self):
        report = spectral_sim.linear_limit_study(self.state, self.params, StepperConfig(dt=0.01, scheme=4), 0.05)
        self.assertEqual(len(report.errors), 3)
        self.assertLess(abs(report.slope - 2.0), 0.1)

    def test_second_order_scheme_converges_at_its_order(self):
        report = spectral_sim.self_convergence_study(self.state, self.params, StepperConfig(dt=0.02, scheme=2), 0.08)
        self.assertEqual(report.steps, [0.02, 0.01, 0.005])
        self.assertTrue(report.decreasing)
        self.assertLess(abs(report.slope - 2.0), 0.2)

    @skipUnless(settings.LAB_SLOW_TESTS, "slow")
    def test_fourth_order_scheme_converges_at_its_order(self):
        report = spectral_sim.self_convergence_study(self.state, self.params, StepperConfig(dt=0.04, scheme=4), 0.32)
        self.assertLess(abs(report.slope - 4.0), 0.2)

    @skipUnless(settings.LAB_SLOW_TESTS, "slow")
    def test_formulations_approach_each_other(self):
        report = spectral_sim.formulation_study(self.state, self.params, StepperConfig(dt=0.02, scheme=4), 0.08)
        self.assertEqual(len(report.errors), 4)
        self.assertTrue(report.decreasing)
