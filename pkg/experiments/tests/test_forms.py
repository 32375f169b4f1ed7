import math

from django.test import SimpleTestCase

from experiments.forms import ExperimentConfigForm


def form(**values):
    return ExperimentConfigForm(data=values)


class ExperimentConfigFormTests(SimpleTestCase):
    def test_defaults_are_valid_for_every_kind(self):
        for kind in ("symbol", "linear-decay", "strichartz", "simulate", "norms", "apriori", "verify-all"):
            f = form(kind=kind)
            self.assertTrue(f.is_valid(), (kind, f.errors))

    def test_derived_values_are_filled_in(self):
        f = form(kind="simulate", mu=0.8)
        self.assertTrue(f.is_valid(), f.errors)
        self.assertAlmostEqual(f.cleaned_data["mu_prime"], -0.6)
        self.assertAlmostEqual(f.cleaned_data["length"], 2.0 * math.pi)

    def test_exponents_outside_the_theorem_regime(self):
        f = form(kind="norms", q=3.5)
        self.assertFalse(f.is_valid())
        self.assertEqual(f.errors.as_data()["__all__"][0].code, "q < 3")

    def test_exponents_are_not_checked_for_symbol_runs(self):
        self.assertTrue(form(kind="symbol", q=3.5).is_valid())

    def test_sweep_needs_parameter_lists(self):
        f = form(kind="sweep")
        self.assertFalse(f.is_valid())
        self.assertEqual(f.errors.as_data()["__all__"][0].code, "parameter grid nonempty")
        f = form(kind="sweep", omegas="1,10", epsilons=[0.05, 0.1], seeds="0,1")
        self.assertTrue(f.is_valid(), f.errors)
        self.assertEqual(f.cleaned_data["omegas"], [1.0, 10.0])
        self.assertEqual(f.cleaned_data["seeds"], [0, 1])

    def test_list_fields_reject_text(self):
        self.assertFalse(form(kind="sweep", omegas="a,b", epsilons="0.1").is_valid())
        self.assertFalse(form(kind="sweep", omegas="1", epsilons="0.1", seeds="1.5").is_valid())

    def test_random_data_needs_three_bands(self):
        f = form(kind="simulate", n=16)
        self.assertFalse(f.is_valid())
        self.assertTrue(form(kind="simulate", n=16, recipe="gaussian-bump").is_valid())

    def test_second_order_scheme_time_step(self):
        f = form(kind="simulate", scheme=2, dt=0.1)
        self.assertFalse(f.is_valid())

    def test_strichartz_band_between_rotation_and_cutoff(self):
        f = form(kind="strichartz", Omega=50.0)
        self.assertFalse(f.is_valid())
        self.assertEqual(f.errors.as_data()["__all__"][0].code, "|Omega| eps < 2^j <= beta / eps")

    def test_linear_decay_needs_beta_at_least_one(self):
        f = form(kind="linear-decay", beta=0.5)
        self.assertFalse(f.is_valid())
        self.assertEqual(f.errors.as_data()["__all__"][0].code, "beta >= 1")

    def test_unknown_recipe_is_a_field_error(self):
        f = form(kind="simulate", recipe="vortex-ring")
        self.assertFalse(f.is_valid())
        self.assertIn("recipe", f.errors)
