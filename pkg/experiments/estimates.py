"""Composite solution norms, data functionals and fitted-constant diagnostics.

Every lemma check here reports ratios ``LHS / RHS`` and the largest of them
(the empirical constant). Nothing asserts a particular value of a constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import lp_besov, spectral_sim
from .errors import ConstraintError, InstabilityError, LabError
from .linsymbol import FluidParams
from .lp_besov import BesovSpec, DyadicPartition, TimeSeries, Truncation

logger = logging.getLogger(__name__)

INF = math.inf


# ---------------------------------------------------------------------------
# exponent suite
# ---------------------------------------------------------------------------


def theorem_regime_violations(q: float, r: float) -> list[str]:
    failed = []
    if not 2 < q:
        failed.append("2 < q")
    if not q < 3:
        failed.append("q < 3")
    if not 2 < r:
        failed.append("2 < r")
    if not r < INF:
        failed.append("r < inf")
    if failed:
        return failed
    if 1 / q + 1 / r > 0.5 + 1e-14:
        failed.append("1/q + 1/r <= 1/2")
    if 2 / r > 3 / q - 0.5 + 1e-14:
        failed.append("2/r <= 3/q - 1/2")
    middle = -1.5 + 4 / r
    if not -3 / q <= middle + 1e-14:
        failed.append("-3/q <= -3/2 + 4/r")
    if not middle < 3 / q:
        failed.append("-3/2 + 4/r < 3/q")
    return failed


@dataclass(frozen=True)
class NormSuiteSpec:
    q: float = 2.5
    r: float = 12.0
    alpha: float | None = None
    beta0: float = 1.0

    @property
    def r_conjugate(self) -> float:
        return self.r / (self.r - 1.0)

    @property
    def r_star(self) -> float:
        return 1.0 / (0.5 - 1.0 / self.r)

    def alpha_for(self, params: FluidParams) -> float:
        return params.omega_eps if self.alpha is None else self.alpha

    def high_threshold(self, params: FluidParams) -> float:
        return self.beta0 / params.eps

    def validate(self, params: FluidParams | None = None) -> "NormSuiteSpec":
        failed = theorem_regime_violations(self.q, self.r)
        if failed:
            raise ConstraintError(failed[0], f"q={self.q} r={self.r}")
        if not self.beta0 > 0:
            raise ConstraintError("beta0 > 0", f"beta0={self.beta0}")
        if params is not None:
            alpha = self.alpha_for(params)
            if alpha < params.omega_eps:
                raise ConstraintError("|Omega| eps <= alpha", f"alpha={alpha:.6g}")
            if not alpha < self.high_threshold(params):
                raise ConstraintError("alpha < beta0 / eps", f"alpha={alpha:.6g} beta0/eps={self.high_threshold(params):.6g}")
        return self


# ---------------------------------------------------------------------------
# norm evaluation
# ---------------------------------------------------------------------------


def low(beta: float) -> Truncation:
    return Truncation.low(max(beta, 0.0))


def mid(alpha: float, beta: float) -> Truncation | None:
    """``alpha < 2^j <= beta``; ``None`` when the window is empty."""
    return Truncation.mid(alpha, beta) if alpha < beta else None


def high(beta: float) -> Truncation:
    return Truncation.high(beta)


@dataclass(frozen=True)
class Summand:
    name: str
    label: str
    variable: str
    s: float
    p: float
    sigma: float
    truncation: Truncation | None
    r: float
    tilde: bool = True
    weight: float = 1.0


class NormEvaluator:
    """Band tables of one run, reused for every norm evaluated on it.

    ``variable`` is ``"au"`` (joint magnitude), ``"a"`` or ``"u"``.
    """

    def __init__(self, joint: TimeSeries, part: DyadicPartition | None = None):
        if joint.snapshots[0].components != 4:
            raise ConstraintError("joint (a, u) series", f"components={joint.snapshots[0].components}")
        self.joint = joint
        self.part = part or lp_besov.make_partition(joint.grid)
        self.times = joint.times
        self._series = {
            "au": joint,
            "a": joint.map(lambda f: f.component(slice(0, 1))),
            "u": joint.map(lambda f: f.component(slice(1, 4))),
        }
        self._tables: dict[tuple[str, float], np.ndarray] = {}

    @classmethod
    def from_run(cls, run: spectral_sim.RunSeries, part: DyadicPartition | None = None) -> "NormEvaluator":
        return cls(run.field_series("au"), part)

    def table(self, variable: str, p: float) -> np.ndarray:
        key = (variable, p)
        if key not in self._tables:
            self._tables[key] = lp_besov.series_band_table(self._series[variable], (p,), self.part)[p]
        return self._tables[key]

    def is_empty(self, truncation: Truncation | None) -> bool:
        return truncation is None or not truncation.mask(self.part.band_array).any()

    def norm(
        self,
        variable: str,
        s: float,
        p: float,
        sigma: float,
        truncation: Truncation | None = None,
        r: float = INF,
        *,
        tilde: bool = True,
        upto: int | None = None,
    ) -> float:
        truncation = lp_besov.FULL if truncation is None else truncation
        end = len(self.times) if upto is None else upto + 1
        table = self.table(variable, p)[:end]
        times = self.times[:end]
        spec = BesovSpec(s, p, sigma, truncation)
        if tilde:
            return lp_besov.chemin_lerner_from_table(table, times, r, spec, self.part)
        return lp_besov.lebesgue_from_table(table, times, r, spec, self.part)

    def summand(self, item: Summand, upto: int | None = None) -> float:
        if self.is_empty(item.truncation):
            return 0.0
        value = self.norm(item.variable, item.s, item.p, item.sigma, item.truncation, item.r, tilde=item.tilde, upto=upto)
        return item.weight * value


@dataclass
class NormReport:
    norm: str
    t: float
    summands: dict[str, float]
    labels: dict[str, str]
    empty: list[str]

    @property
    def total(self) -> float:
        return float(sum(self.summands.values()))

    def as_dict(self) -> dict:
        return {"norm": self.norm, "t": self.t, "summands": dict(self.summands), "total": self.total, "empty": list(self.empty)}


def energy_summands(params: FluidParams, spec: NormSuiteSpec) -> list[Summand]:
    eps = params.eps
    we = params.omega_eps
    b = spec.high_threshold(params)
    return [
        Summand("E1", "(a,u) l;b0/eps Lt^inf B^-1/2_2,1", "au", -0.5, 2, 1, low(b), INF),
        Summand("E2", "u l;b0/eps Lt^2 B^1/2_2,1", "u", 0.5, 2, 1, low(b), 2.0),
        Summand("E3", "(a,u) l;|W|eps L^inf B^-3/2_2,inf", "au", -1.5, 2, INF, low(we), INF, tilde=False),
        Summand("E4", "(a,u) l;|W|eps Lt^1 B^5/2_2,inf", "au", 2.5, 2, INF, low(we), 1.0),
        Summand("E5", "(a,u) m;|W|eps,b0/eps Lt^inf B^1/2_2,1", "au", 0.5, 2, 1, mid(we, b), INF),
        Summand("E6", "(a,u) m;|W|eps,b0/eps L^1 B^5/2_2,1", "au", 2.5, 2, 1, mid(we, b), 1.0, tilde=False),
        Summand("E7", "a m;|W|eps,b0/eps Lt^2 B^1/2_2,1", "a", 0.5, 2, 1, mid(we, b), 2.0),
        Summand("E8", "eps a h;b0/eps Lt^inf B^3/2_2,1", "a", 1.5, 2, 1, high(b), INF, weight=eps),
        Summand("E9", "a/eps h;b0/eps L^1 B^3/2_2,1", "a", 1.5, 2, 1, high(b), 1.0, tilde=False, weight=1.0 / eps),
        Summand("E10", "u h;b0/eps Lt^inf B^1/2_2,1", "u", 0.5, 2, 1, high(b), INF),
        Summand("E11", "u h;b0/eps L^1 B^5/2_2,1", "u", 2.5, 2, 1, high(b), 1.0, tilde=False),
    ]


def auxiliary_summands(params: FluidParams, spec: NormSuiteSpec) -> list[Summand]:
    q, r, rc = spec.q, spec.r, spec.r_conjugate
    eps = params.eps
    we = params.omega_eps
    alpha = spec.alpha_for(params)
    b = spec.high_threshold(params)
    return [
        Summand("A1", "(a,u) l;|W|eps Lt^r' B^(3/q-3+4/r')_q,inf", "au", 3 / q - 3 + 4 / rc, q, INF, low(we), rc),
        Summand("A2", "(a,u) l;b0/eps Lt^r B^(3/q-3+4/r)_q,inf", "au", 3 / q - 3 + 4 / r, q, INF, low(b), r),
        Summand("A3", "(a,u) m;|W|eps,alpha Lt^r B^(3/q-1+2/r)_q,1", "au", 3 / q - 1 + 2 / r, q, 1, mid(we, alpha), r),
        Summand("A4", "(a,u) m;alpha,b0/eps Lt^inf B^(3/q-1)_q,1", "au", 3 / q - 1, q, 1, mid(alpha, b), INF),
        Summand("A5", "(a,u) m;alpha,b0/eps L^1 B^(3/q+1)_q,1", "au", 3 / q + 1, q, 1, mid(alpha, b), 1.0, tilde=False),
        Summand("A6", "eps a h;b0/eps Lt^inf B^(3/q)_q,1", "a", 3 / q, q, 1, high(b), INF, weight=eps),
        Summand("A7", "a/eps h;b0/eps L^1 B^(3/q)_q,1", "a", 3 / q, q, 1, high(b), 1.0, tilde=False, weight=1.0 / eps),
        Summand("A8", "u h;b0/eps Lt^inf B^(3/q-1)_q,1", "u", 3 / q - 1, q, 1, high(b), INF),
        Summand("A9", "u h;b0/eps L^1 B^(3/q+1)_q,1", "u", 3 / q + 1, q, 1, high(b), 1.0, tilde=False),
    ]


def _report(name: str, items: list[Summand], ev: NormEvaluator, upto: int | None) -> NormReport:
    index = len(ev.times) - 1 if upto is None else upto
    values, empty = {}, []
    for item in items:
        if ev.is_empty(item.truncation):
            empty.append(item.name)
        values[item.name] = ev.summand(item, upto)
    return NormReport(name, float(ev.times[index]), values, {i.name: i.label for i in items}, empty)


def _evaluator(series, part: DyadicPartition | None) -> NormEvaluator:
    if isinstance(series, NormEvaluator):
        return series
    if isinstance(series, spectral_sim.RunSeries):
        return NormEvaluator.from_run(series, part)
    return NormEvaluator(series, part)


def compute_E(series, params: FluidParams, spec: NormSuiteSpec, *, part=None, upto: int | None = None) -> NormReport:
    """Energy norm ``E`` up to snapshot ``upto`` (default: the whole run)."""
    ev = _evaluator(series, part)
    return _report("E", energy_summands(params, spec), ev, upto)


def compute_A(series, params: FluidParams, spec: NormSuiteSpec, *, part=None, upto: int | None = None) -> NormReport:
    spec.validate(params)
    ev = _evaluator(series, part)
    return _report("A", auxiliary_summands(params, spec), ev, upto)


# ---------------------------------------------------------------------------
# data functionals
# ---------------------------------------------------------------------------


@dataclass
class DataFunctionals:
    d_star: float
    d: float
    d_upper: float
    norms: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"D_star": self.d_star, "D_eps": self.d, "D": self.d_upper, "norms": dict(self.norms)}


def _static_norms(state: spectral_sim.State, params: FluidParams, part: DyadicPartition) -> dict[str, float]:
    a, u = state.a, spectral_sim.velocity_of(state, params)
    au = lp_besov.stack_fields(a, u)
    neg = BesovSpec(-1.5, 2, INF)
    half = BesovSpec(0.5, 2, 1)
    three_half = BesovSpec(1.5, 2, 1)
    table_au = lp_besov.band_norms(au, 2, part)
    table_a = lp_besov.band_norms(a, 2, part)
    table_u = lp_besov.band_norms(u, 2, part)
    return {
        "au_B-3/2_2inf": lp_besov.aggregate(table_au, neg, part),
        "au_B1/2_21": lp_besov.aggregate(table_au, half, part),
        "a_B-3/2_2inf": lp_besov.aggregate(table_a, neg, part),
        "a_B3/2_21": lp_besov.aggregate(table_a, three_half, part),
        "u_B-3/2_2inf": lp_besov.aggregate(table_u, neg, part),
        "u_B1/2_21": lp_besov.aggregate(table_u, half, part),
    }


def compute_data_functionals(initial: spectral_sim.State, params: FluidParams, part: DyadicPartition | None = None) -> DataFunctionals:
    part = part or lp_besov.make_partition(initial.grid)
    n = _static_norms(initial, params, part)
    eps = params.eps
    d_star = n["au_B-3/2_2inf"] + eps * n["a_B3/2_21"] * n["u_B-3/2_2inf"]
    d_eps = d_star + n["au_B1/2_21"] + eps * n["a_B3/2_21"]
    d_upper = (
        n["a_B-3/2_2inf"] + n["a_B3/2_21"] + n["u_B-3/2_2inf"] + n["u_B1/2_21"]
        + n["a_B3/2_21"] * n["a_B-3/2_2inf"]
    )
    return DataFunctionals(d_star, d_eps, d_upper, n)


def fit_c4(states: Sequence[spectral_sim.State], params: FluidParams, part: DyadicPartition | None = None) -> dict:
    """Smallest ``C4`` with ``||(a0,u0)||_{B^1/2_2,1} / C4 <= D_eps <= C4 D`` over the given data."""
    ratios = []
    for state in states:
        data = compute_data_functionals(state, params, part)
        if data.d == 0 or data.d_upper == 0:
            continue
        ratios.append(max(data.norms["au_B1/2_21"] / data.d, data.d / data.d_upper))
    return {"C4": max(ratios) if ratios else None, "samples": len(ratios)}


def c4_ladder(
    state: spectral_sim.State,
    params: FluidParams,
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    part: DyadicPartition | None = None,
) -> dict:
    """``fit_c4`` on ``state`` multiplied by each of ``scales``; ``spread`` is ``(max - min) / max``."""
    part = part or lp_besov.make_partition(state.grid)
    per_scale = {float(scale): fit_c4([state.scaled(scale)], params, part)["C4"] for scale in scales}
    fitted = [value for value in per_scale.values() if value is not None]
    spread = (max(fitted) - min(fitted)) / max(fitted) if fitted and max(fitted) > 0 else None
    logger.info("c4_ladder scales=%s C4=%s spread=%s", len(per_scale), max(fitted) if fitted else None, spread)
    return {"C4": max(fitted) if fitted else None, "per_scale": per_scale, "spread": spread}


# ---------------------------------------------------------------------------
# interpolation checks
# ---------------------------------------------------------------------------


@dataclass
class RatioReport:
    name: str
    ratios: list[float]
    skipped: int = 0
    scaling_drift: float | None = None

    @property
    def max_ratio(self) -> float | None:
        return max(self.ratios) if self.ratios else None

    def as_dict(self) -> dict:
        return {"name": self.name, "max_ratio": self.max_ratio, "samples": len(self.ratios), "skipped": self.skipped, "scaling_drift": self.scaling_drift}


def _mixed(A: float, E: float, r: float, halved: bool) -> float:
    """``A^{r/(r-1)} E^{(r-2)/(r-1)}`` (or its square root when ``halved``)."""
    pa, pe = r / (r - 1.0), (r - 2.0) / (r - 1.0)
    if halved:
        pa, pe = pa / 2.0, pe / 2.0
    return A**pa * E**pe


def ae_sides(ev: NormEvaluator, params: FluidParams, spec: NormSuiteSpec, E: float, A: float, upto: int | None = None) -> dict[str, tuple[float, float]]:
    q, r, rc = spec.q, spec.r, spec.r_conjugate
    eps, alpha = params.eps, spec.alpha_for(params)
    b = spec.high_threshold(params)
    return {
        "AE1": (eps * ev.norm("a", 3 / q, q, 1, r=INF, upto=upto), eps * alpha * E + A),
        "AE2": (ev.norm("au", 3 / q - 1 + 2 / r, q, 1, r=r, upto=upto), A),
        "AE3": (
            ev.norm("au", 3 / q, q, 1, r=2.0, upto=upto) + ev.norm("au", 3 / q - 1, q, INF, r=2.0, upto=upto),
            A + _mixed(A, E, r, halved=True),
        ),
        "AE4": (
            ev.norm("a", 3 / q - 1 + 2 / rc, q, 1, low(4 * b), r=rc, upto=upto)
            + ev.norm("u", 3 / q - 1 + 2 / rc, q, 1, r=rc, upto=upto),
            A,
        ),
    }


def lemma_E_sides(ev: NormEvaluator, params: FluidParams, spec: NormSuiteSpec, E: float, upto: int | None = None) -> tuple[float, float]:
    b = spec.high_threshold(params)
    lhs = (
        params.eps * ev.norm("a", 1.5, 2, 1, r=INF, upto=upto)
        + ev.norm("u", 2.5, 2, 1, high(b), 1.0, tilde=False, upto=upto)
        + ev.norm("au", 1.5, 2, 1, r=2.0, upto=upto)
        + ev.norm("au", 0.5, 2, 1, r=INF, upto=upto)
        + ev.norm("au", 0.5, 2, 1, r=2.0, upto=upto)
        + ev.norm("au", -0.5, 2, 1, r=INF, upto=upto)
    )
    return lhs, E


def lemma_AE_check(
    runs: Iterable,
    params: FluidParams,
    spec: NormSuiteSpec,
    *,
    part: DyadicPartition | None = None,
    scaling: float | None = None,
) -> dict[str, RatioReport]:
    """Ratios of the four interpolation inequalities relating ``A``, ``E`` and mixed norms.

    With ``scaling`` set, every run is re-evaluated after multiplying the
    fields by it and the largest relative ratio change is reported.
    """
    spec.validate(params)
    reports = {name: RatioReport(name, []) for name in ("AE1", "AE2", "AE3", "AE4")}
    for run in runs:
        ev = _evaluator(run, part)
        ratios = _ae_ratios(ev, params, spec)
        for name, ratio in ratios.items():
            if ratio is None:
                reports[name].skipped += 1
            else:
                reports[name].ratios.append(ratio)
        if scaling is not None:
            scaled = _ae_ratios(NormEvaluator(ev.joint.scaled(scaling), ev.part), params, spec)
            for name, ratio in ratios.items():
                if ratio is not None and scaled[name] is not None:
                    change = abs(scaled[name] - ratio) / ratio
                    reports[name].scaling_drift = max(reports[name].scaling_drift or 0.0, change)
    for report in reports.values():
        logger.info("ae_check name=%s max_ratio=%s samples=%s", report.name, report.max_ratio, len(report.ratios))
    return reports


def _ae_ratios(ev: NormEvaluator, params: FluidParams, spec: NormSuiteSpec) -> dict[str, float | None]:
    E = compute_E(ev, params, spec).total
    A = compute_A(ev, params, spec).total
    out = {}
    for name, (lhs, rhs) in ae_sides(ev, params, spec, E, A).items():
        out[name] = lhs / rhs if rhs > 0 else None
    return out


def lemma_E_check(runs: Iterable, params: FluidParams, spec: NormSuiteSpec, *, part: DyadicPartition | None = None) -> RatioReport:
    report = RatioReport("lemma_E", [])
    for run in runs:
        ev = _evaluator(run, part)
        E = compute_E(ev, params, spec).total
        lhs, rhs = lemma_E_sides(ev, params, spec, E)
        if rhs > 0:
            report.ratios.append(lhs / rhs)
        else:
            report.skipped += 1
    return report


# ---------------------------------------------------------------------------
# continuation quantities
# ---------------------------------------------------------------------------


def alpha_delta(initial: spectral_sim.State, params: FluidParams, delta: float, part: DyadicPartition | None = None) -> float:
    """Smallest ``alpha >= 1`` (1 or a band edge ``2^j``) with a data tail above ``alpha`` at most ``delta``."""
    part = part or lp_besov.make_partition(initial.grid)
    a, u = initial.a, spectral_sim.velocity_of(initial, params)
    au_table = lp_besov.band_norms(lp_besov.stack_fields(a, u), 2, part)
    a_table = lp_besov.band_norms(a, 2, part)
    candidates = sorted({1.0} | {2.0**j for j in part.bands if 2.0**j >= 1.0})
    for alpha in candidates:
        tail = lp_besov.aggregate(au_table, BesovSpec(0.5, 2, 1, high(alpha)), part) + lp_besov.aggregate(
            a_table, BesovSpec(1.5, 2, 1, high(alpha)), part
        )
        if tail <= delta:
            return alpha
    return candidates[-1]


@dataclass
class Thresholds:
    delta: float
    alpha_delta: float
    conditions: dict[str, dict]

    @property
    def all_hold(self) -> bool:
        return all(item["ok"] for item in self.conditions.values())

    def as_dict(self) -> dict:
        return {"delta": self.delta, "alpha_delta": self.alpha_delta, "conditions": self.conditions, "all_hold": self.all_hold}


def _condition(value: float, bound: float, strict: bool = False) -> dict:
    ok = value < bound if strict else value <= bound
    return {"value": value, "bound": bound, "ok": bool(ok)}


def intersection_norm(data: DataFunctionals) -> float:
    """``||(a0,u0)||`` in ``B^-3/2_2,inf`` intersected with ``B^1/2_2,1``."""
    return data.norms["au_B-3/2_2inf"] + data.norms["au_B1/2_21"]


def default_delta(data: DataFunctionals, params: FluidParams, spec: NormSuiteSpec) -> float:
    r = spec.r
    candidates = [params.omega_eps ** (2 / r) * data.d_star, params.eps * data.d]
    if params.Omega != 0:
        candidates.append(abs(params.Omega) ** (-1 / r) * intersection_norm(data))
    return max(candidates)


def continuation_thresholds(
    initial: spectral_sim.State,
    params: FluidParams,
    spec: NormSuiteSpec,
    delta: float | None = None,
    part: DyadicPartition | None = None,
) -> Thresholds:
    part = part or lp_besov.make_partition(initial.grid)
    data = compute_data_functionals(initial, params, part)
    delta = default_delta(data, params, spec) if delta is None else delta
    r = spec.r
    ad = alpha_delta(initial, params, delta, part)
    rot = abs(params.Omega) ** (-1 / r) if params.Omega != 0 else INF
    conditions = {
        "|Omega| eps <= 1": _condition(params.omega_eps, 1.0),
        "beta0/eps > alpha_delta": _condition(ad, spec.high_threshold(params), strict=True),
        "alpha_delta^(2/r) |Omega|^(-1/r) <= 1": _condition(ad ** (2 / r) * rot, 1.0),
        "(|Omega| eps)^(2/r) D*_eps <= delta": _condition(params.omega_eps ** (2 / r) * data.d_star, delta),
        "alpha_delta^(2/r) |Omega|^(-1/r) ||(a0,u0)|| <= delta": _condition(ad ** (2 / r) * rot * intersection_norm(data), delta),
        "eps alpha_delta D_eps <= delta": _condition(params.eps * ad * data.d, delta),
    }
    return Thresholds(delta, ad, conditions)


# ---------------------------------------------------------------------------
# a priori diagnostic
# ---------------------------------------------------------------------------


def time_ladder(times: np.ndarray, per_decade: int = 8) -> list[int]:
    """Snapshot indices closest to a geometric ladder with ``per_decade`` points per decade."""
    times = np.asarray(times)
    positive = np.flatnonzero(times > 0)
    if positive.size == 0:
        raise ConstraintError("run has snapshots after t = 0")
    t0, t1 = times[positive[0]], times[-1]
    if t1 <= t0:
        return [int(positive[0])]
    count = max(2, int(math.ceil(per_decade * math.log10(t1 / t0))) + 1)
    targets = np.geomspace(t0, t1, count)
    indices = sorted({int(positive[np.argmin(np.abs(times[positive] - t))]) for t in targets})
    return indices


def rhs_energy(data: DataFunctionals, E: float, A: float, params: FluidParams, spec: NormSuiteSpec) -> float:
    r, eps = spec.r, params.eps
    alpha = spec.alpha_for(params)
    mix = eps * alpha * E + A
    return (
        data.d
        + (1 + mix) * (A**2 + _mixed(A, E, r, False))
        + mix**2
        + mix * E
        + eps * E**2
        + _mixed(A, E, r, True) * E
    )


def rhs_auxiliary(data: DataFunctionals, delta: float, E: float, A: float, params: FluidParams, spec: NormSuiteSpec) -> float:
    r, eps = spec.r, params.eps
    alpha = spec.alpha_for(params)
    mix = eps * alpha * E + A
    rot = abs(params.Omega) ** (-1 / r) if params.Omega != 0 else INF
    mixed = _mixed(A, E, r, False)
    return (
        delta
        + (1 + mix) * (A**2 + mixed)
        + rot * (1 + E) * E**2
        + rot * (A**2 + mixed)
        + mix**2
        + mixed
    )


def low_energy_pieces(ev: NormEvaluator, data: DataFunctionals, params: FluidParams, spec: NormSuiteSpec, upto: int) -> dict[str, dict]:
    q, r, rc = spec.q, spec.r, spec.r_conjugate
    eps, we, W = params.eps, params.omega_eps, params.Omega
    lw = low(we)
    quad = ev.norm("au", 3 / q - 1, q, INF, r=2.0, upto=upto) ** 2
    Y = eps * ev.norm("a", 3 / q, q, 1, r=INF, upto=upto)
    core = data.d_star + (1 + Y) * quad
    a_half = eps * ev.norm("a", 0.5, 2, 1, r=INF, upto=upto)
    rot = we ** (2 / r)
    pieces = {
        "low_ene_1": (
            ev.norm("au", -1.5, 2, INF, lw, INF, tilde=False, upto=upto),
            core + a_half * ev.norm("u", -0.5, 2, INF, r=INF, tilde=False, upto=upto),
        ),
        "low_ene_2": (
            ev.norm("au", 3 / q - 3 + 4 / r, q, INF, lw, r, upto=upto),
            rot * core + a_half * ev.norm("u", 3 / q - 2 + 4 / r, q, INF, r=r, upto=upto),
        ),
        "low_ene_3": (
            ev.norm("au", 3 / q - 3 + 4 / rc, q, INF, lw, rc, upto=upto),
            rot * core
            + eps * ev.norm("a", 3 / q - 2 / r, q, INF, r=INF, upto=upto) * ev.norm("u", 3 / q - 1 + 2 / rc, q, INF, r=rc, upto=upto)
            + W**2 * eps**3 * ev.norm("a", 3 / q, q, 1, r=2.0, upto=upto)
            * (ev.norm("u", 3 / q, q, 1, r=2.0, upto=upto) + ev.norm("u", 3 / q - 1 + 2 / r, q, 1, r=r, upto=upto)),
        ),
        "low_ene_4": (
            ev.norm("au", 2.5, 2, INF, lw, 1.0, upto=upto),
            we**2 * core,
        ),
    }
    return {name: {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else None} for name, (lhs, rhs) in pieces.items()}


def pressure_potential_table(run: spectral_sim.RunSeries, params: FluidParams, part: DyadicPartition) -> np.ndarray:
    """Band norms of ``G(eps a)`` per snapshot."""
    fns = spectral_sim.pressure_functions(params.pressure)
    eps = params.eps
    snaps = tuple(lp_besov.compose(lambda a: fns.G(eps * a), state.a) for state in run.states)
    return lp_besov.series_band_table(TimeSeries(run.times, snaps), (2.0,), part)[2.0]


def pressure_potential_piece(
    table: np.ndarray, times: np.ndarray, params: FluidParams, spec: NormSuiteSpec, part: DyadicPartition, upto: int
) -> float:
    """``eps^-2 ||G(eps a)||^{l;b0/eps}`` in ``Lt^1 B^-1/2_2,inf``."""
    spec_g = BesovSpec(-0.5, 2, INF, low(spec.high_threshold(params)))
    value = lp_besov.chemin_lerner_from_table(table[: upto + 1], times[: upto + 1], 1.0, spec_g, part)
    return value / params.eps**2


@dataclass
class AprioriReport:
    run_id: str
    rows: list[dict]
    fitted_constants: dict[str, float | None]
    regime_flag: str
    data: DataFunctionals
    thresholds: Thresholds
    lhs_growth_time: float | None = None
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "rows": self.rows,
            "fitted_constants": self.fitted_constants,
            "regime_flag": self.regime_flag,
            "lhs_growth_time": self.lhs_growth_time,
            "data": self.data.as_dict(),
            "thresholds": self.thresholds.as_dict(),
            "notes": self.notes,
        }


def _fit_constant(lhs: Sequence[float], rhs: Sequence[float]) -> float | None:
    ratios = [l / r for l, r in zip(lhs, rhs) if r > 0 and math.isfinite(r)]
    return max(ratios) if ratios else None


def apriori_diagnostic(
    run: spectral_sim.RunSeries,
    params: FluidParams,
    spec: NormSuiteSpec,
    *,
    delta: float | None = None,
    part: DyadicPartition | None = None,
    run_id: str = "",
    per_decade: int = 8,
    growth_factor: float = 10.0,
) -> AprioriReport:
    """Both sides of the closing inequalities for ``E`` and ``A`` along a time ladder.

    The constant ``C`` of each inequality is fitted on the first decade of
    the ladder; later times report ``LHS <= C * RHS`` and the tightness
    ``LHS / (C * RHS)``.
    """
    spec.validate(params)
    if len(run.times) < 2:
        raise ConstraintError("run has at least 2 snapshots", f"snapshots={len(run.times)}")
    part = part or lp_besov.make_partition(run.grid)
    ev = NormEvaluator.from_run(run, part)
    data = compute_data_functionals(run.states[0], params, part)
    thresholds = continuation_thresholds(run.states[0], params, spec, delta, part)
    delta = thresholds.delta
    ladder = time_ladder(run.times, per_decade)
    g_table = pressure_potential_table(run, params, part)

    rows = []
    for index in ladder:
        E = compute_E(ev, params, spec, upto=index).total
        A = compute_A(ev, params, spec, upto=index).total
        rows.append(
            {
                "t": float(run.times[index]),
                "E": E,
                "A": A,
                "rhs_E": rhs_energy(data, E, A, params, spec),
                "rhs_A": rhs_auxiliary(data, delta, E, A, params, spec),
                "low_energy": low_energy_pieces(ev, data, params, spec, index),
                "pressure_potential": pressure_potential_piece(g_table, run.times, params, spec, part, index),
            }
        )

    first_decade = [row for row in rows if row["t"] <= 10.0 * rows[0]["t"]]
    constants = {
        "C_E": _fit_constant([r["E"] for r in first_decade], [r["rhs_E"] for r in first_decade]),
        "C_A": _fit_constant([r["A"] for r in first_decade], [r["rhs_A"] for r in first_decade]),
    }
    growth_time = None
    E_ref = rows[0]["E"]
    for row in rows:
        for key, c in (("E", constants["C_E"]), ("A", constants["C_A"])):
            lhs, rhs = row[key], row[f"rhs_{key}"]
            if lhs == 0 and rhs == 0:
                row[f"ok_{key}"], row[f"tightness_{key}"] = True, None
                continue
            if c is None or not math.isfinite(rhs):
                row[f"ok_{key}"], row[f"tightness_{key}"] = None, None
                continue
            row[f"ok_{key}"] = bool(lhs <= c * rhs * (1 + 1e-9))
            row[f"tightness_{key}"] = lhs / (c * rhs)
        grew = row["ok_E"] is False or (E_ref > 0 and row["E"] > growth_factor * E_ref)
        if grew and growth_time is None:
            growth_time = row["t"]

    notes = []
    if params.Omega == 0:
        notes.append("Omega = 0: rotation factor |Omega|^(-1/r) is infinite, rhs_A unbounded")
    if ev.is_empty(low(params.omega_eps)):
        notes.append("low-frequency bands below |Omega| eps are empty on this grid")
    if not run.report.stable:
        flag = "unstable"
    elif growth_time is not None:
        flag = "lhs_growth"
    else:
        flag = "bounded"
    logger.info("apriori_done run=%s rows=%s flag=%s C_E=%s C_A=%s", run_id, len(rows), flag, constants["C_E"], constants["C_A"])
    return AprioriReport(run_id, rows, constants, flag, data, thresholds, growth_time, notes)


# ---------------------------------------------------------------------------
# regime probe
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    Omega: float
    eps: float
    seed: int
    stable: bool
    bounded: bool | None
    peak_E: float | None
    E_ref: float | None
    failure_time: float | None
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    error: str = ""

    @property
    def regime_ok(self) -> bool:
        return bool(self.stable and self.bounded)

    def row(self) -> dict:
        return {
            "Omega": self.Omega,
            "eps": self.eps,
            "seed": self.seed,
            "stable": self.stable,
            "bounded": self.bounded,
            "peak_E": self.peak_E,
            "E_ref": self.E_ref,
            "failure_time": self.failure_time,
            "error": self.error,
        }


def _trajectory(run: spectral_sim.RunSeries, params: FluidParams, spec: NormSuiteSpec, part: DyadicPartition) -> list[tuple[float, float]]:
    if len(run.times) < 2:
        return []
    ev = NormEvaluator.from_run(run, part)
    return [(float(run.times[i]), compute_E(ev, params, spec, upto=i).total) for i in range(1, len(run.times))]


def probe_cell(
    recipe: spectral_sim.DataRecipe,
    grid: lp_besov.TorusGrid,
    params: FluidParams,
    cfg: spectral_sim.StepperConfig,
    spec: NormSuiteSpec,
    horizon: float,
    multiplier: float = 2.0,
) -> CellResult:
    """One ``(Omega, eps, seed)`` cell: run to ``horizon`` and follow ``E(t)``.

    The reference value is ``E`` at the first snapshot after ``t = 0``.
    """
    part = lp_besov.make_partition(grid)
    try:
        initial = spectral_sim.make_initial_data(recipe, grid, params, part, positivity_floor=cfg.positivity_floor)
        run = spectral_sim.simulate(initial, params, cfg, horizon)
        failure = None
    except InstabilityError as exc:
        run, failure = exc.partial, exc
    except LabError as exc:
        logger.warning("probe_cell_rejected Omega=%s eps=%s seed=%s error=%s", params.Omega, params.eps, recipe.seed, exc)
        return CellResult(params.Omega, params.eps, recipe.seed, False, None, None, None, None, error=str(exc))
    trajectory = _trajectory(run, params, spec, part) if run is not None else []
    E_ref = trajectory[0][1] if trajectory else None
    peak = max((e for _, e in trajectory), default=None)
    bounded = None if E_ref is None else bool(peak <= multiplier * E_ref)
    result = CellResult(
        Omega=params.Omega,
        eps=params.eps,
        seed=recipe.seed,
        stable=failure is None,
        bounded=bounded,
        peak_E=peak,
        E_ref=E_ref,
        failure_time=None if failure is None else failure.failure_time,
        trajectory=trajectory,
        error="" if failure is None else str(failure),
    )
    logger.info(
        "probe_cell_done Omega=%s eps=%s seed=%s stable=%s bounded=%s", params.Omega, params.eps, recipe.seed, result.stable, bounded
    )
    return result


@dataclass
class RegimeMap:
    cells: list[CellResult]

    def rows(self) -> list[dict]:
        return [c.row() for c in self.cells]

    def omegas(self) -> list[float]:
        return sorted({c.Omega for c in self.cells}, key=abs)

    def epsilons(self) -> list[float]:
        return sorted({c.eps for c in self.cells})

    def seeds(self) -> list[int]:
        return sorted({c.seed for c in self.cells})

    def stability_fraction(self, eps: float, Omega: float) -> float | None:
        cells = [c for c in self.cells if c.eps == eps and c.Omega == Omega]
        return sum(c.regime_ok for c in cells) / len(cells) if cells else None


def continuation_probe(
    recipe: spectral_sim.DataRecipe,
    grid: lp_besov.TorusGrid,
    base: FluidParams,
    pairs: Sequence[tuple[float, float]],
    cfg: spectral_sim.StepperConfig,
    spec: NormSuiteSpec,
    horizon: float,
    multiplier: float = 2.0,
    seeds: Sequence[int] | None = None,
    *,
    cell_runner: Callable[..., CellResult] = probe_cell,
) -> RegimeMap:
    """Probe every ``(Omega, eps)`` pair (and seed); cells come back in grid order."""
    if not pairs:
        raise ConstraintError("parameter grid nonempty")
    seeds = [recipe.seed] if seeds is None else list(seeds)
    cells = []
    for Omega, eps in pairs:
        params = base.with_rotation(Omega, eps)
        for seed in seeds:
            cells.append(
                cell_runner(
                    spectral_sim.DataRecipe(recipe.name, recipe.amplitude, seed, recipe.band, recipe.bands, recipe.density_fraction),
                    grid, params, cfg, spec, horizon, multiplier,
                )
            )
    return RegimeMap(cells)


def stability_monotone_fraction(regime: RegimeMap, max_omega_eps: float = 0.1) -> float | None:
    """Share of ``eps`` rows whose stability fraction is nondecreasing in ``|Omega|``.

    Only cells with ``|Omega| eps <= max_omega_eps`` enter a row.
    """
    rows = 0
    monotone = 0
    for eps in regime.epsilons():
        fractions = [
            regime.stability_fraction(eps, Omega)
            for Omega in regime.omegas()
            if abs(Omega) * eps <= max_omega_eps + 1e-12 and regime.stability_fraction(eps, Omega) is not None
        ]
        if len(fractions) < 2:
            continue
        rows += 1
        monotone += all(b >= a for a, b in zip(fractions, fractions[1:]))
    return monotone / rows if rows else None


def upward_closed_fraction(regime: RegimeMap, max_omega_eps: float = 0.1) -> float | None:
    """Share of ``(eps, seed)`` sequences whose stable ``|Omega|`` set is upward closed."""
    total = 0
    closed = 0
    for eps in regime.epsilons():
        for seed in regime.seeds():
            flags = [
                c.regime_ok
                for Omega in regime.omegas()
                for c in regime.cells
                if c.eps == eps and c.seed == seed and c.Omega == Omega and abs(Omega) * eps <= max_omega_eps + 1e-12
            ]
            if not flags:
                continue
            total += 1
            first = next((i for i, ok in enumerate(flags) if ok), len(flags))
            closed += all(flags[first:])
    return closed / total if total else None
