import math

from django import forms

from . import estimates, linsymbol, lp_besov, spectral_sim
from .errors import ConstraintError
from .models import EXPERIMENT_KIND_CHOICES

SCHEMA_VERSION = "lab-config/1"

FORMULATION_CHOICES = [(f.value, f.value) for f in spectral_sim.Formulation]
RECIPE_CHOICES = [(name, name) for name in spectral_sim.RECIPES]
SCHEME_CHOICES = [(2, "2"), (4, "4")]

# kinds that evaluate the auxiliary norm and therefore need the theorem exponents
NORM_KINDS = {"norms", "apriori", "sweep"}
RUN_KINDS = {"simulate", "norms", "apriori", "sweep"}
PARTITIONED_RECIPES = {"random-band", "large-data"}


class FloatListField(forms.Field):
    """Comma separated floats (or a JSON list)."""

    def to_python(self, value):
        if value in self.empty_values:
            return []
        if isinstance(value, (list, tuple)):
            items = value
        else:
            items = [item for item in str(value).split(",") if item.strip()]
        try:
            return [float(item) for item in items]
        except (TypeError, ValueError):
            raise forms.ValidationError("Enter a comma separated list of numbers.")


class IntListField(FloatListField):
    def to_python(self, value):
        values = super().to_python(value)
        if any(int(v) != v for v in values):
            raise forms.ValidationError("Enter a comma separated list of integers.")
        return [int(v) for v in values]


class ExperimentConfigForm(forms.Form):
    kind = forms.ChoiceField(choices=EXPERIMENT_KIND_CHOICES)

    n = forms.IntegerField(initial=32)
    length = forms.FloatField(required=False)

    mu = forms.FloatField(initial=1.0)
    mu_prime = forms.FloatField(required=False)
    Omega = forms.FloatField(initial=10.0)
    eps = forms.FloatField(initial=0.1)
    gamma = forms.FloatField(initial=1.4)

    q = forms.FloatField(initial=2.5)
    r = forms.FloatField(initial=12.0)
    alpha = forms.FloatField(required=False)
    beta0 = forms.FloatField(initial=1.0)
    beta = forms.FloatField(initial=1.0)

    recipe = forms.ChoiceField(choices=RECIPE_CHOICES, initial="random-band")
    amplitude = forms.FloatField(initial=0.1, min_value=0.0)
    seed = forms.IntegerField(initial=0)
    band = forms.IntegerField(initial=0)

    horizon = forms.FloatField(initial=1.0)
    dt = forms.FloatField(initial=0.01)
    scheme = forms.TypedChoiceField(choices=SCHEME_CHOICES, coerce=int, initial=4)
    snapshot_every = forms.IntegerField(initial=10, min_value=1)
    positivity_floor = forms.FloatField(initial=0.05)
    formulation = forms.ChoiceField(choices=FORMULATION_CHOICES, initial="velocity")

    samples = forms.IntegerField(initial=200, min_value=1)

    strichartz_q = forms.FloatField(initial=4.0)
    strichartz_r = forms.FloatField(initial=4.0)
    strichartz_band = forms.IntegerField(initial=2)

    omegas = FloatListField(required=False)
    epsilons = FloatListField(required=False)
    seeds = IntListField(required=False)
    multiplier = forms.FloatField(initial=2.0)

    output = forms.CharField(required=False)

    def __init__(self, data=None, *args, **kwargs):
        if data is not None:
            data = {**self.defaults(), **{k: v for k, v in data.items() if v is not None}}
        super().__init__(data, *args, **kwargs)

    @classmethod
    def defaults(cls) -> dict:
        return {name: field.initial for name, field in cls.base_fields.items() if field.initial is not None}

    def clean(self):
        cleaned = super().clean()
        if self.errors:
            return cleaned
        try:
            self._check_constraints(cleaned)
        except ConstraintError as exc:
            raise forms.ValidationError(str(exc), code=exc.constraint)
        return cleaned

    def _check_constraints(self, c):
        if c.get("length") is None:
            c["length"] = 2.0 * math.pi
        if c.get("mu_prime") is None:
            c["mu_prime"] = 1.0 - 2.0 * c["mu"]
        grid = lp_besov.TorusGrid(c["n"], c["length"])
        params = config_params(c)
        kind = c["kind"]
        if kind in NORM_KINDS or kind == "strichartz" or (kind in RUN_KINDS and c["recipe"] in PARTITIONED_RECIPES):
            lp_besov.make_partition(grid)
        if kind in NORM_KINDS:
            config_norm_spec(c).validate(params)
        if kind == "linear-decay":
            if not c["beta"] >= 1:
                raise ConstraintError("beta >= 1", f"beta={c['beta']}")
            if params.omega_eps > c["beta"] / params.eps:
                raise ConstraintError("|Omega| eps <= beta / eps")
        if kind == "strichartz":
            linsymbol.check_strichartz_exponents(c["strichartz_q"], c["strichartz_r"])
            j = c["strichartz_band"]
            if j not in grid.bands:
                raise ConstraintError("band inside the resolvable range", f"j={j} range={list(grid.band_range)}")
            for Omega in c["omegas"] or [c["Omega"]]:
                if not abs(Omega) * params.eps < 2.0**j <= c["beta"] / params.eps:
                    raise ConstraintError("|Omega| eps < 2^j <= beta / eps", f"Omega={Omega}")
        if kind in RUN_KINDS:
            if not c["horizon"] > 0:
                raise ConstraintError("horizon > 0", f"horizon={c['horizon']}")
            cfg = config_stepper(c)
            spectral_sim.check_time_step(grid, params, cfg)
            spectral_sim.DataRecipe(c["recipe"], c["amplitude"], c["seed"], c["band"])
        if kind == "sweep":
            if not (c["omegas"] and c["epsilons"]):
                raise ConstraintError("parameter grid nonempty", "set omegas and epsilons")
            for eps in c["epsilons"]:
                spectral_sim.check_time_step(grid, params.with_rotation(params.Omega, eps), cfg)
                for Omega in c["omegas"]:
                    config_norm_spec(c).validate(params.with_rotation(Omega, eps))
            if not c["multiplier"] >= 1:
                raise ConstraintError("multiplier >= 1", f"multiplier={c['multiplier']}")


def config_params(c) -> linsymbol.FluidParams:
    law = linsymbol.PressureLaw(gamma=c["gamma"])
    return linsymbol.FluidParams(c["mu"], c["mu_prime"], c["Omega"], c["eps"], law)


def config_norm_spec(c) -> estimates.NormSuiteSpec:
    return estimates.NormSuiteSpec(c["q"], c["r"], c.get("alpha"), c["beta0"])


def config_stepper(c) -> spectral_sim.StepperConfig:
    return spectral_sim.StepperConfig(
        dt=c["dt"],
        scheme=c["scheme"],
        snapshot_every=c["snapshot_every"],
        positivity_floor=c["positivity_floor"],
    )


def first_error(form: forms.Form) -> str:
    for field_name, messages in form.errors.items():
        label = "config" if field_name == "__all__" else field_name
        return f"{label}: {messages[0]}"
    return "invalid config"
