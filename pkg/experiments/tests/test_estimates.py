import math

import numpy as np
from django.test import SimpleTestCase

from experiments import estimates, lp_besov, spectral_sim
from experiments.errors import ConstraintError
from experiments.estimates import CellResult, NormEvaluator, NormSuiteSpec, RegimeMap
from experiments.linsymbol import FluidParams
from experiments.lp_besov import TorusGrid
from experiments.spectral_sim import DataRecipe, StepperConfig


def params(Omega=10.0, eps=0.1):
    return FluidParams.from_mu(1.0, Omega, eps)


class ShortRunMixin:
    """One small nonlinear run shared by every test of the class."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.grid = TorusGrid(32)
        cls.part = lp_besov.make_partition(cls.grid)
        cls.params = params()
        cls.spec = NormSuiteSpec()
        initial = spectral_sim.make_initial_data(DataRecipe("random-band", 0.05, seed=1), cls.grid, cls.params, cls.part)
        cls.short_run = spectral_sim.simulate(initial, cls.params, StepperConfig(dt=0.01, scheme=4, snapshot_every=1), 0.05)


class RegimeTests(SimpleTestCase):
    def test_default_exponents_are_admissible(self):
        self.assertEqual(estimates.theorem_regime_violations(2.5, 12.0), [])

    def test_violations_are_named(self):
        self.assertEqual(estimates.theorem_regime_violations(3.5, 12.0), ["q < 3"])
        self.assertIn("1/q + 1/r <= 1/2", estimates.theorem_regime_violations(2.5, 4.0))
        self.assertIn("r < inf", estimates.theorem_regime_violations(2.5, math.inf))

    def test_spec_validation_against_params(self):
        NormSuiteSpec().validate(params())
        with self.assertRaises(ConstraintError) as ctx:
            NormSuiteSpec(alpha=0.5).validate(params())
        self.assertEqual(ctx.exception.constraint, "|Omega| eps <= alpha")
        with self.assertRaises(ConstraintError) as ctx:
            NormSuiteSpec(alpha=20.0).validate(params())
        self.assertEqual(ctx.exception.constraint, "alpha < beta0 / eps")
        with self.assertRaises(ConstraintError):
            NormSuiteSpec(beta0=0.0).validate()

    def test_derived_exponents(self):
        spec = NormSuiteSpec(r=12.0)
        self.assertAlmostEqual(spec.r_conjugate, 12.0 / 11.0)
        self.assertAlmostEqual(spec.r_star, 1.0 / (0.5 - 1.0 / 12.0))
        self.assertAlmostEqual(spec.alpha_for(params()), 1.0)


class NormTests(ShortRunMixin, SimpleTestCase):
    def test_evaluator_needs_joint_series(self):
        with self.assertRaises(ConstraintError):
            NormEvaluator(self.short_run.field_series("u"), self.part)

    def test_energy_norm_is_homogeneous(self):
        ev = NormEvaluator.from_run(self.short_run, self.part)
        scaled = NormEvaluator(ev.joint.scaled(3.0), self.part)
        E = estimates.compute_E(ev, self.params, self.spec)
        self.assertGreater(E.total, 0.0)
        self.assertAlmostEqual(estimates.compute_E(scaled, self.params, self.spec).total / E.total, 3.0, places=9)
        A = estimates.compute_A(ev, self.params, self.spec)
        self.assertAlmostEqual(estimates.compute_A(scaled, self.params, self.spec).total / A.total, 3.0, places=9)

    def test_empty_windows_are_reported(self):
        # alpha defaults to |Omega| eps, so the window between them is empty
        A = estimates.compute_A(self.short_run, self.params, self.spec, part=self.part)
        self.assertIn("A3", A.empty)
        self.assertEqual(A.summands["A3"], 0.0)
        self.assertEqual(set(A.as_dict()), {"norm", "t", "summands", "total", "empty"})

    def test_norm_grows_with_the_window(self):
        early = estimates.compute_E(self.short_run, self.params, self.spec, part=self.part, upto=1)
        late = estimates.compute_E(self.short_run, self.params, self.spec, part=self.part)
        self.assertEqual(early.t, float(self.short_run.times[1]))
        self.assertGreaterEqual(late.summands["E4"], early.summands["E4"])

    def test_data_functionals_are_ordered(self):
        data = estimates.compute_data_functionals(self.short_run.states[0], self.params, self.part)
        self.assertGreater(data.d_star, 0.0)
        self.assertLessEqual(data.d_star, data.d)
        self.assertEqual(set(data.as_dict()), {"D_star", "D_eps", "D", "norms"})

    def test_fitted_c4_brackets_data_functionals(self):
        state = self.short_run.states[0]
        fit = estimates.fit_c4([state, state.scaled(2.0)], self.params, self.part)
        self.assertEqual(fit["samples"], 2)
        data = estimates.compute_data_functionals(state, self.params, self.part)
        self.assertLessEqual(data.d, fit["C4"] * data.d_upper * (1 + 1e-12))
        self.assertLessEqual(data.norms["au_B1/2_21"], fit["C4"] * data.d * (1 + 1e-12))

    def test_c4_is_stable_across_amplitude_scalings(self):
        state = self.short_run.states[0]
        ladder = estimates.c4_ladder(state, self.params, (0.5, 1.0, 2.0), self.part)
        self.assertEqual(sorted(ladder["per_scale"]), [0.5, 1.0, 2.0])
        self.assertLess(ladder["spread"], 0.1)
        tiny = estimates.c4_ladder(state, self.params, (1e-3, 2e-3), self.part)
        self.assertLess(tiny["spread"], 1e-2)

    def test_interpolation_ratios_do_not_depend_on_scale(self):
        reports = estimates.lemma_AE_check([self.short_run], self.params, self.spec, part=self.part, scaling=5.0)
        self.assertEqual(set(reports), {"AE1", "AE2", "AE3", "AE4"})
        for report in reports.values():
            self.assertEqual(len(report.ratios) + report.skipped, 1)
            if report.ratios:
                self.assertLess(report.scaling_drift, 1e-9)

    def test_lemma_E_ratio_is_finite(self):
        report = estimates.lemma_E_check([self.short_run], self.params, self.spec, part=self.part)
        self.assertEqual(len(report.ratios), 1)
        self.assertTrue(math.isfinite(report.max_ratio))


class ContinuationTests(ShortRunMixin, SimpleTestCase):
    def test_alpha_delta_is_a_band_edge(self):
        initial = self.short_run.states[0]
        self.assertEqual(estimates.alpha_delta(initial, self.params, 1e6, self.part), 1.0)
        tight = estimates.alpha_delta(initial, self.params, 0.0, self.part)
        self.assertEqual(tight, 2.0 ** max(self.part.bands))

    def test_thresholds_report_every_condition(self):
        thresholds = estimates.continuation_thresholds(self.short_run.states[0], self.params, self.spec, part=self.part)
        self.assertGreater(thresholds.delta, 0.0)
        self.assertEqual(len(thresholds.conditions), 6)
        self.assertTrue(thresholds.conditions["|Omega| eps <= 1"]["ok"])

    def test_time_ladder(self):
        times = np.linspace(0.0, 1.0, 101)
        ladder = estimates.time_ladder(times, per_decade=4)
        self.assertEqual(ladder[0], 1)
        self.assertEqual(ladder[-1], 100)
        self.assertEqual(ladder, sorted(set(ladder)))
        with self.assertRaises(ConstraintError):
            estimates.time_ladder(np.zeros(3))

    def test_apriori_rows(self):
        report = estimates.apriori_diagnostic(self.short_run, self.params, self.spec, part=self.part, run_id="abc")
        self.assertEqual(report.run_id, "abc")
        self.assertIn(report.regime_flag, {"bounded", "lhs_growth", "unstable"})
        self.assertIsNotNone(report.fitted_constants["C_E"])
        for row in report.rows:
            self.assertEqual(set(row["low_energy"]), {"low_ene_1", "low_ene_2", "low_ene_3", "low_ene_4"})
            self.assertIn("ok_E", row)
            self.assertGreaterEqual(row["pressure_potential"], 0.0)

    def test_apriori_needs_two_snapshots(self):
        with self.assertRaises(ConstraintError):
            estimates.apriori_diagnostic(self.short_run.until(0.0), self.params, self.spec, part=self.part)


def cell(Omega, eps, ok, seed=0):
    return CellResult(Omega, eps, seed, stable=True, bounded=ok, peak_E=1.0, E_ref=1.0, failure_time=None)


class RegimeMapTests(SimpleTestCase):
    def test_fractions_on_synthetic_cells(self):
        regime = RegimeMap(
            [
                cell(1.0, 0.01, False), cell(5.0, 0.01, True), cell(10.0, 0.01, True),
                cell(1.0, 0.02, True), cell(2.5, 0.02, False), cell(5.0, 0.02, True),
            ]
        )
        self.assertEqual(regime.omegas(), [1.0, 2.5, 5.0, 10.0])
        self.assertEqual(regime.stability_fraction(0.01, 5.0), 1.0)
        self.assertIsNone(regime.stability_fraction(0.01, 2.5))
        self.assertEqual(estimates.stability_monotone_fraction(regime), 0.5)
        self.assertEqual(estimates.upward_closed_fraction(regime), 0.5)

    def test_cells_outside_the_small_product_are_ignored(self):
        regime = RegimeMap([cell(1.0, 0.05, True), cell(5.0, 0.05, False)])
        self.assertIsNone(estimates.stability_monotone_fraction(regime))

    def test_probe_visits_pairs_and_seeds_in_order(self):
        calls = []

        def runner(recipe, grid, p, cfg, spec, horizon, multiplier):
            calls.append((p.Omega, p.eps, recipe.seed))
            return cell(p.Omega, p.eps, True, recipe.seed)

        regime = estimates.continuation_probe(
            DataRecipe("random-band", 0.1), TorusGrid(32), params(), [(1.0, 0.1), (2.0, 0.1)],
            StepperConfig(dt=0.01), NormSuiteSpec(), 0.1, seeds=[3, 4], cell_runner=runner,
        )
        self.assertEqual(calls, [(1.0, 0.1, 3), (1.0, 0.1, 4), (2.0, 0.1, 3), (2.0, 0.1, 4)])
        self.assertEqual(len(regime.rows()), 4)
        with self.assertRaises(ConstraintError):
            estimates.continuation_probe(
                DataRecipe(), TorusGrid(32), params(), [], StepperConfig(dt=0.01), NormSuiteSpec(), 0.1, cell_runner=runner
            )

    def test_rejected_cell_is_recorded(self):
        result = estimates.probe_cell(
            DataRecipe("single-mode", 50.0, band=1), TorusGrid(32), params(), StepperConfig(dt=0.01), NormSuiteSpec(), 0.05
        )
        self.assertFalse(result.stable)
        self.assertFalse(result.regime_ok)
        self.assertIn("floor", result.error)

    def test_probe_cell_follows_energy(self):
        result = estimates.probe_cell(
            DataRecipe("random-band", 0.05, seed=2), TorusGrid(32), params(),
            StepperConfig(dt=0.01, snapshot_every=1), NormSuiteSpec(), 0.03,
        )
        self.assertTrue(result.stable)
        self.assertEqual(len(result.trajectory), 3)
        self.assertEqual(result.E_ref, result.trajectory[0][1])
        self.assertIsNotNone(result.bounded)
