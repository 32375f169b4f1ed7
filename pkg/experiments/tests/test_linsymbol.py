import math
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from experiments import linsymbol, lp_besov
from experiments.errors import ConstraintError, GridError
from experiments.linsymbol import FluidParams


def rotating(Omega=10.0, eps=0.1, mu=1.0):
    return FluidParams.from_mu(mu, Omega, eps)


class FluidParamsTests(SimpleTestCase):
    def test_viscosity_relation_is_enforced(self):
        with self.assertRaises(ConstraintError):
            FluidParams(1.0, 0.5, 1.0, 0.1)
        with self.assertRaises(ConstraintError):
            FluidParams.from_mu(0.0, 1.0, 0.1)

    def test_with_rotation_keeps_viscosity(self):
        params = rotating().with_rotation(3.0, 0.2)
        self.assertEqual((params.mu, params.Omega, params.eps), (1.0, 3.0, 0.2))
        self.assertAlmostEqual(params.omega_eps, 0.6)


class SymbolTests(SimpleTestCase):
    def test_quartic_matches_permutation_charpoly(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            params = FluidParams.from_mu(rng.uniform(0.1, 1.5), rng.uniform(-20, 20), rng.uniform(0.05, 1.0))
            xi = rng.normal(size=3) * 3.0
            quartic = linsymbol.characteristic_quartic(xi, params)
            charpoly = linsymbol.matrix_charpoly(linsymbol.symbol_matrix(xi, params).matrix)
            assert_allclose(charpoly.real, quartic, rtol=1e-10, atol=1e-10 * np.max(np.abs(quartic)))
            assert_allclose(charpoly.imag, 0.0, atol=1e-9 * np.max(np.abs(quartic)))

    def test_factorization_without_rotation(self):
        params = FluidParams.from_mu(0.7, 0.0, 0.3)
        xi = np.array([0.4, -1.2, 2.0])
        assert_allclose(
            linsymbol.quartic_factorization_without_rotation(xi, params),
            linsymbol.characteristic_quartic(xi, params),
            rtol=1e-12,
        )

    def test_eigenvalues_have_nonnegative_real_part(self):
        params = rotating()
        for xi in ([1.0, 0.0, 0.0], [0.3, 2.0, -1.0], [0.0, 0.0, 5.0]):
            values = linsymbol.eigenvalues(xi, params)
            self.assertEqual(values.shape, (4,))
            self.assertTrue(np.all(values.real > 0))

    def test_match_spectra_pairs_permuted_values(self):
        first = np.array([1 + 2j, 3 - 1j, 0.5, 2j])
        matched, deviation, ok = linsymbol.match_spectra(first, first[::-1])
        self.assertTrue(ok)
        self.assertLess(deviation, 1e-14)


class DecayTests(SimpleTestCase):
    def test_kappa(self):
        self.assertAlmostEqual(linsymbol.decay_rate_kappa(2.0, 0.0), 4.0)
        self.assertAlmostEqual(linsymbol.decay_rate_kappa(1.0, 1.0), 0.5)
        with self.assertRaises(ConstraintError):
            linsymbol.decay_rate_kappa(0.0, 0.0)

    def test_fit_window_end_point(self):
        # well separated modes: the plain 10 / bound rule
        self.assertAlmostEqual(linsymbol.decay_horizon(np.array([1.0, 100.0]), 1.0), 10.0)
        self.assertAlmostEqual(linsymbol.decay_horizon(np.array([1e-6, 1.0]), 1e-6), 1e4)
        # close neighbour: stretched to 40 / gap
        self.assertAlmostEqual(linsymbol.decay_horizon(np.array([0.1, 0.2]), 1.0), 400.0)
        # never past 600 e-foldings of the slowest mode
        self.assertAlmostEqual(linsymbol.decay_horizon(np.array([10.0, 10.001]), 1e-3), 60.0)
        self.assertEqual(linsymbol.decay_horizon(np.array([10.0, 10.001]), 1e-3, horizon=3.0), 3.0)

    def test_decay_bound_holds_on_sample(self):
        params = rotating()
        rng = np.random.default_rng(1)
        modes = linsymbol.sample_decay_modes(params, 1.0, 6, rng)
        reports = linsymbol.verify_decay_bound(params, 1.0, modes)
        self.assertEqual(len(reports), 6)
        for report in reports:
            self.assertGreaterEqual(report.fitted_rate, report.rate_bound * (1 - 1e-9))
            self.assertLessEqual(report.abscissa, -report.rate_bound + 1e-12)

    def test_decay_preconditions(self):
        params = rotating()
        with self.assertRaises(ConstraintError):
            linsymbol.verify_decay_bound(params, 0.5, [[1.0, 0.0, 0.0]])
        with self.assertRaises(ConstraintError):
            linsymbol.verify_decay_bound(params, 1.0, [[0.0, 0.0, 0.0]])
        with self.assertRaises(ConstraintError):
            linsymbol.verify_decay_bound(params, 1.0, [[25.0, 0.0, 0.0]])
        with self.assertRaises(ConstraintError):
            linsymbol.verify_decay_bound(rotating(Omega=200.0), 1.0, [[1.0, 0.0, 0.0]])

    def test_energy_sandwich(self):
        result = linsymbol.energy_sandwich_check(rotating(), 1.0, 300, np.random.default_rng(2))
        self.assertTrue(result["ok"])
        self.assertGreaterEqual(result["min_ratio"], 0.5)
        self.assertLessEqual(result["max_ratio"], 1.5)

    def test_propagator_is_a_contraction(self):
        params = rotating()
        modes = linsymbol.sample_decay_modes(params, 1.0, 10, np.random.default_rng(3))
        self.assertLessEqual(linsymbol.propagator_contraction(params, modes, (0.1, 1.0, 10.0)), 1.0 + 1e-10)

    def test_decay_csv_has_hash_line(self):
        import tempfile
        from pathlib import Path

        params = rotating()
        reports = linsymbol.verify_decay_bound(params, 1.0, [[1.0, 0.0, 0.0]])
        with tempfile.TemporaryDirectory() as tmp:
            path = linsymbol.write_decay_csv(reports, Path(tmp) / "decay.csv", "abc")
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], "# config_hash=abc")
        self.assertEqual(lines[1].split(","), list(linsymbol.DECAY_COLUMNS))
        self.assertEqual(len(lines), 3)

    @skipUnless(settings.LAB_SLOW_TESTS, "slow")
    def test_fourth_order_slope_when_rotation_dominates(self):
        slope, _ = linsymbol.fourth_order_slope(rotating(), 1.0)
        self.assertLess(abs(slope - 4.0), 0.2)


class DuhamelTests(SimpleTestCase):
    def test_quadrature_matches_stiff_reference(self):
        params = FluidParams.from_mu(1.0, 2.0, 0.5)
        xi = [1.0, 0.5, 0.0]

        def forcing(tau):
            return np.array([math.cos(tau), 0.0, math.sin(tau), 0.0])

        U0 = np.array([1.0, 0.5j, 0.0, -0.25])
        assert_allclose(
            linsymbol.duhamel_solution(xi, params, U0, forcing, 1.0),
            linsymbol.duhamel_reference(xi, params, U0, forcing, 1.0),
            rtol=1e-7,
            atol=1e-9,
        )


class StrichartzTests(SimpleTestCase):
    def setUp(self):
        self.grid = lp_besov.TorusGrid(32)
        self.part = lp_besov.make_partition(self.grid)
        self.data = lp_besov.random_band_field(self.grid, self.part, np.random.default_rng(4), [2], components=4)

    def test_exponent_checks(self):
        linsymbol.check_strichartz_exponents(4.0, 4.0)
        with self.assertRaises(ConstraintError):
            linsymbol.check_strichartz_exponents(3.0, 3.0)
        with self.assertRaises(ConstraintError):
            linsymbol.check_strichartz_exponents(math.inf, 2.0)
        with self.assertRaises(ConstraintError):
            linsymbol.check_strichartz_exponents(1.5, 8.0)

    def test_recurrence_window(self):
        params = rotating()
        expected = 2.0 * math.pi / (10.0 + 10.0 / 2.0)
        self.assertAlmostEqual(linsymbol.recurrence_window(self.grid, params, 2), expected)

    def test_measurement_clips_to_window(self):
        params = rotating()
        result = linsymbol.strichartz_measure(params, 4.0, 4.0, 2, self.data, 10.0, part=self.part)
        self.assertTrue(result.clipped)
        self.assertAlmostEqual(result.horizon, linsymbol.recurrence_window(self.grid, params, 2))
        self.assertGreater(result.value, 0.0)
        self.assertGreaterEqual(result.samples, 64)

    def test_band_must_sit_between_rotation_and_cutoff(self):
        with self.assertRaises(ConstraintError):
            linsymbol.strichartz_measure(rotating(Omega=50.0), 4.0, 4.0, 2, self.data, 0.1, part=self.part)
        with self.assertRaises(GridError):
            linsymbol.strichartz_measure(rotating(), 4.0, 4.0, 6, self.data, 0.1, part=self.part)

    @skipUnless(settings.LAB_SLOW_TESTS, "slow")
    def test_measurement_decreases_with_rotation(self):
        values = []
        horizon = linsymbol.recurrence_window(self.grid, rotating(Omega=35.0), 2)
        for Omega in (5.0, 15.0, 35.0):
            values.append(
                linsymbol.strichartz_measure(rotating(Omega=Omega), 4.0, 4.0, 2, self.data, horizon, part=self.part).value
            )
        self.assertTrue(all(b < a for a, b in zip(values, values[1:])))


class LinearEnergyTests(SimpleTestCase):
    def test_block_energy_ratio_at_least_one(self):
        grid = lp_besov.TorusGrid(32)
        part = lp_besov.make_partition(grid)
        data = lp_besov.random_band_field(grid, part, np.random.default_rng(5), [1, 2], components=4)
        result = linsymbol.simple_energy_check(data, rotating(), np.linspace(0.0, 0.5, 11), part)
        self.assertTrue({1, 2} <= set(result["ratios"]))
        self.assertGreaterEqual(result["max_ratio"], 1.0 - 1e-12)
        self.assertTrue(math.isfinite(result["max_ratio"]))

    def test_high_frequency_constant_is_finite_and_eps_stable(self):
        grid = lp_besov.TorusGrid(32)
        part = lp_besov.make_partition(grid)
        data = lp_besov.random_band_field(grid, part, np.random.default_rng(8), [2, 3], components=4)
        times = np.linspace(0.0, 0.5, 201)
        ratios = []
        for eps in (0.5, 0.25):
            result = linsymbol.high_frequency_check(data, rotating(eps=eps), times, part=part)
            self.assertEqual(result["threshold"], 1.0 / eps)
            self.assertGreater(result["rhs"], 0.0)
            self.assertTrue(math.isfinite(result["ratio"]))
            self.assertGreaterEqual(result["ratio"], 1.0 - 1e-6)
            ratios.append(result["ratio"])
        self.assertLess(max(ratios) / min(ratios), 4.0)
