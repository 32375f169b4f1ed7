"""Pseudospectral time stepping of the rotating compressible system.

The state stores four coefficient arrays ``(a, v1, v2, v3)`` where ``v`` is
either the velocity ``u`` or the momentum ``m = (1 + eps a) u``. The linear
part is applied exactly per mode (Lawson exponential Runge-Kutta); nonlinear
terms are formed in physical space and filtered by the 2/3 rule.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy.sparse.linalg import LinearOperator, cg

from . import linsymbol, lp_besov
from .errors import ConstraintError, GridError, InstabilityError, PositivityError
from .linsymbol import FluidParams, PressureLaw
from .lp_besov import SpectralField, TorusGrid

logger = logging.getLogger(__name__)

SERIES_CUTOFF = 1e-4
CONVERT_RTOL = 1e-14
CONVERT_MAXITER = 100


class Formulation(str, enum.Enum):
    VELOCITY = "velocity"
    MOMENTUM = "momentum"

    @property
    def code(self) -> int:
        return 0 if self is Formulation.VELOCITY else 1


@dataclass(frozen=True, eq=False)
class State:
    grid: TorusGrid
    coeffs: np.ndarray
    formulation: Formulation = Formulation.VELOCITY

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.shape != (4,) + self.grid.spectral_shape:
            raise GridError("state holds (a, v1, v2, v3) on the grid", f"shape={coeffs.shape}")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "formulation", Formulation(self.formulation))

    @classmethod
    def from_fields(cls, a: SpectralField, vel: SpectralField, formulation=Formulation.VELOCITY) -> "State":
        return cls(a.grid, lp_besov.stack_fields(a, vel).coeffs, formulation)

    @property
    def a(self) -> SpectralField:
        return SpectralField(self.grid, self.coeffs[:1])

    @property
    def vel(self) -> SpectralField:
        return SpectralField(self.grid, self.coeffs[1:])

    @property
    def joint(self) -> SpectralField:
        return SpectralField(self.grid, self.coeffs)

    def with_coeffs(self, coeffs: np.ndarray) -> "State":
        return State(self.grid, coeffs, self.formulation)

    def scaled(self, factor: float) -> "State":
        return self.with_coeffs(self.coeffs * factor)

    def density_margin(self, eps: float) -> float:
        """``min_x (1 + eps a(x))`` on the collocation grid."""
        return float(1.0 + eps * lp_besov.inverse(self.coeffs[0], self.grid.n).min())

    def mean_a(self) -> float:
        return float(self.coeffs[0, 0, 0, 0].real)


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: int = 2
    dealias: bool = True
    snapshot_every: int = 10
    positivity_floor: float = 0.05
    nonlinear: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ConstraintError("dt > 0", f"dt={self.dt}")
        if self.scheme not in (2, 4):
            raise ConstraintError("scheme order in {2, 4}", f"scheme={self.scheme}")
        if int(self.snapshot_every) != self.snapshot_every or self.snapshot_every < 1:
            raise ConstraintError("snapshot cadence >= 1", f"snapshot_every={self.snapshot_every}")
        if not 0 < self.positivity_floor < 1:
            raise ConstraintError("0 < positivity floor < 1", f"floor={self.positivity_floor}")


# ---------------------------------------------------------------------------
# pressure functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PressureFunctions:
    """``K, J, Q, G, H`` of a pressure law, vectorized over numpy arrays."""

    law: PressureLaw

    def K(self, a):
        """``P'(1+a)/(1+a) - 1``."""
        a = np.asarray(a, dtype=float)
        if self.law.is_gamma_law:
            return np.expm1((self.law.gamma - 2.0) * np.log1p(a))
        return self.law.pressure_derivative(1.0 + a, 1) / (1.0 + a) - 1.0

    @staticmethod
    def J(a):
        a = np.asarray(a, dtype=float)
        return a / (1.0 + a)

    def Q(self, a):
        """``(P(1+a) - P(1) - a) / a^2`` with ``Q(0) = P''(1)/2``."""
        a = np.asarray(a, dtype=float)
        d2, d3, d4, d5 = self.law.derivatives_at_one(5)[1:]
        series = d2 / 2.0 + d3 * a / 6.0 + d4 * a**2 / 24.0 + d5 * a**3 / 120.0
        small = np.abs(a) < SERIES_CUTOFF
        safe = np.where(small, 1.0, a)
        if self.law.is_gamma_law:
            g = self.law.gamma
            increment = np.expm1(g * np.log1p(safe)) / g
        else:
            increment = self.law.pressure(1.0 + safe) - self.law.pressure(1.0)
        closed = (increment - safe) / safe**2
        return np.where(small, series, closed)

    def _k_derivatives(self) -> tuple[float, float, float, float]:
        if self.law.is_gamma_law:
            g = self.law.gamma
            return (g - 2.0, (g - 2.0) * (g - 3.0), (g - 2.0) * (g - 3.0) * (g - 4.0),
                    (g - 2.0) * (g - 3.0) * (g - 4.0) * (g - 5.0))
        h = 1e-3
        k = lambda x: float(self.K(x))  # noqa: E731
        k1 = (k(h) - k(-h)) / (2 * h)
        k2 = (k(h) - 2 * k(0.0) + k(-h)) / h**2
        return (k1, k2, 0.0, 0.0)

    def G(self, a):
        """``int_0^a K(s) ds``."""
        a = np.asarray(a, dtype=float)
        if self.law.is_gamma_law:
            g = self.law.gamma
            return np.expm1((g - 1.0) * np.log1p(a)) / (g - 1.0) - a
        nodes, weights = np.polynomial.legendre.leggauss(16)
        s = 0.5 * (nodes + 1.0)
        values = self.K(a[..., None] * s)
        return a * np.sum(0.5 * weights * values, axis=-1)

    def H(self, a):
        """``G(a)/a^2 - G''(0)/2``."""
        a = np.asarray(a, dtype=float)
        k1, k2, k3, k4 = self._k_derivatives()
        small = np.abs(a) < SERIES_CUTOFF
        safe = np.where(small, 1.0, a)
        closed = self.G(safe) / safe**2 - k1 / 2.0
        series = k2 * a / 6.0 + k3 * a**2 / 24.0 + k4 * a**3 / 120.0
        return np.where(small, series, closed)


def pressure_functions(law: PressureLaw) -> PressureFunctions:
    return PressureFunctions(law)


# ---------------------------------------------------------------------------
# dealiasing and products
# ---------------------------------------------------------------------------


def dealias_mask(grid: TorusGrid) -> np.ndarray:
    kx, ky, kz = grid.integer_modes
    cut = grid.n / 3.0
    return (np.abs(kx) <= cut) & (np.abs(ky) <= cut) & (np.abs(kz) <= cut)


def dealias(f: SpectralField) -> SpectralField:
    """Zero every mode with some ``|k_i| > n/3``."""
    return f.masked(dealias_mask(f.grid))


def _filter(coeffs: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return coeffs if mask is None else coeffs * mask


def pseudospectral_product(f: SpectralField, g: SpectralField, *, dealiased: bool = True) -> SpectralField:
    """Collocation product followed by the 2/3 filter."""
    n = f.grid.n
    values = lp_besov.inverse(f.coeffs, n) * lp_besov.inverse(g.coeffs, n)
    product = SpectralField(f.grid, lp_besov.forward(values))
    return dealias(product) if dealiased else product


def convolution_oracle(f: SpectralField, g: SpectralField) -> SpectralField:
    """Direct sum ``sum_{k+l=m} f_k g_l`` over all mode pairs, restricted to the 2/3 set.

    Quadratic cost in the number of modes; meant for ``n = 8`` grids.
    """
    grid = f.grid
    n = grid.n
    if f.components != 1 or g.components != 1:
        raise ConstraintError("scalar factors")
    F = sfft.fftn(f.physical()[0]) / n**3
    Gc = sfft.fftn(g.physical()[0]) / n**3
    modes = np.rint(sfft.fftfreq(n, 1.0 / n)).astype(int)
    kk = np.stack(np.meshgrid(modes, modes, modes, indexing="ij"), axis=-1).reshape(-1, 3)
    f_flat = F.reshape(-1)
    g_flat = Gc.reshape(-1)
    cut = n / 3.0
    out = np.zeros((n, n, n), dtype=complex)
    for index, k in enumerate(kk):
        if f_flat[index] == 0:
            continue
        target = k[None, :] + kk
        keep = np.all(np.abs(target) <= cut, axis=1)
        t = target[keep] % n
        np.add.at(out, (t[:, 0], t[:, 1], t[:, 2]), f_flat[index] * g_flat[keep])
    return SpectralField(grid, out[..., : n // 2 + 1])


# ---------------------------------------------------------------------------
# nonlinear terms
# ---------------------------------------------------------------------------


def _elasticity(vel_hat: np.ndarray, grid: TorusGrid, params: FluidParams) -> np.ndarray:
    """``L v = mu Lap v + (mu + mu') grad div v`` in Fourier space."""
    k = grid.wavevector
    k2 = grid.wavenumber**2
    return -params.mu * k2 * vel_hat - (params.mu + params.mu_prime) * k * np.sum(k * vel_hat, axis=0)


def _check_positivity(a_phys: np.ndarray, params: FluidParams, floor: float, t: float = math.nan) -> float:
    margin = float(1.0 + params.eps * a_phys.min())
    if not margin > floor:
        raise PositivityError(
            f"density margin {margin:.6g} below floor {floor:.6g}",
            failure_time=t,
        )
    return margin


def nonlinearity_velocity(
    state: State,
    params: FluidParams,
    *,
    dealiased: bool = True,
    positivity_floor: float = 0.05,
) -> tuple[SpectralField, SpectralField]:
    """``(-div(a u), -[(u.grad)u + J(eps a) L u + K(eps a) grad a / eps])``."""
    if state.formulation is not Formulation.VELOCITY:
        raise ConstraintError("velocity formulation", state.formulation.value)
    grid, eps, n = state.grid, params.eps, state.grid.n
    mask = dealias_mask(grid) if dealiased else None
    fns = pressure_functions(params.pressure)
    k = grid.wavevector
    a_hat, u_hat = state.coeffs[0], state.coeffs[1:]

    a = lp_besov.inverse(a_hat, n)
    _check_positivity(a, params, positivity_floor)
    u = lp_besov.inverse(u_hat, n)
    grad_u = lp_besov.inverse(1j * k[None, :] * u_hat[:, None], n)
    grad_a = lp_besov.inverse(1j * k * a_hat, n)
    lap_u = lp_besov.inverse(_elasticity(u_hat, grid, params), n)

    flux = _filter(lp_besov.forward(a * u), mask)
    rhs_a = -np.sum(1j * k * flux, axis=0)

    advection = np.einsum("jxyz,ijxyz->ixyz", u, grad_u)
    ea = eps * a
    N = advection + fns.J(ea) * lap_u + fns.K(ea) * grad_a / eps
    rhs_u = -_filter(lp_besov.forward(N), mask)
    return SpectralField(grid, rhs_a), SpectralField(grid, rhs_u)


def nonlinearity_momentum(
    state: State,
    params: FluidParams,
    *,
    dealiased: bool = True,
    positivity_floor: float = 0.05,
) -> tuple[SpectralField, SpectralField]:
    """``(0, -[div((1+eps a) u (x) u) + eps L(a u) + grad(Q(eps a) a^2)])`` with ``u = m / (1 + eps a)``."""
    if state.formulation is not Formulation.MOMENTUM:
        raise ConstraintError("momentum formulation", state.formulation.value)
    grid, eps, n = state.grid, params.eps, state.grid.n
    mask = dealias_mask(grid) if dealiased else None
    fns = pressure_functions(params.pressure)
    k = grid.wavevector
    a_hat, m_hat = state.coeffs[0], state.coeffs[1:]

    a = lp_besov.inverse(a_hat, n)
    _check_positivity(a, params, positivity_floor)
    rho = 1.0 + eps * a
    u = lp_besov.inverse(m_hat, n) / rho

    stress = _filter(lp_besov.forward(rho * u[:, None] * u[None, :]), mask)
    div_stress = np.sum(1j * k[None, :] * stress, axis=1)
    au_hat = _filter(lp_besov.forward(a * u), mask)
    pressure_hat = _filter(lp_besov.forward(fns.Q(eps * a) * a * a), mask)

    N = div_stress + eps * _elasticity(au_hat, grid, params) + 1j * k * pressure_hat
    rhs_a = np.zeros_like(a_hat)
    return SpectralField(grid, rhs_a), SpectralField(grid, -N)


def nonlinearity(state: State, params: FluidParams, *, dealiased: bool = True, positivity_floor: float = 0.05) -> np.ndarray:
    fn = nonlinearity_velocity if state.formulation is Formulation.VELOCITY else nonlinearity_momentum
    rhs_a, rhs_v = fn(state, params, dealiased=dealiased, positivity_floor=positivity_floor)
    return np.concatenate([rhs_a.coeffs, rhs_v.coeffs], axis=0)


def _project(values: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    return lp_besov.inverse(lp_besov.forward(values) * mask, n)


def _divide_on_retained(m_hat: np.ndarray, rho: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Solve ``P(rho u) = m`` for ``u`` on the 2/3 set.

    ``P rho P`` is symmetric positive definite there while ``rho > 0``, so
    conjugate gradients invert the forward conversion to roundoff.
    """
    n, mask = grid.n, dealias_mask(grid)
    shape = (m_hat.shape[0],) + grid.shape
    size = int(np.prod(shape))
    operator = LinearOperator(
        (size, size), matvec=lambda x: _project(rho * x.reshape(shape), mask, n).ravel(), dtype=float
    )
    preconditioner = LinearOperator(
        (size, size), matvec=lambda x: _project(x.reshape(shape) / rho, mask, n).ravel(), dtype=float
    )
    m = lp_besov.inverse(m_hat * mask, n)
    guess = _project(m / rho, mask, n)
    solution, info = cg(
        operator, m.ravel(), x0=guess.ravel(), rtol=CONVERT_RTOL, atol=0.0, maxiter=CONVERT_MAXITER, M=preconditioner
    )
    if info:
        logger.warning("convert cg_not_converged n=%s iterations=%s", n, info)
    return lp_besov.forward(solution.reshape(shape)) * mask


def convert(state: State, params: FluidParams, direction: str | Formulation, *, positivity_floor: float = 0.05) -> State:
    """Switch between ``u`` and ``m = P((1 + eps a) u)`` (``direction`` is the target).

    ``P`` is the 2/3 filter. Velocity to momentum multiplies in physical space and
    filters; momentum to velocity solves the filtered product for ``u``, so
    ``u -> m -> u`` returns the retained part of ``u``.
    """
    target = Formulation(direction if direction not in ("u", "m") else {"u": "velocity", "m": "momentum"}[direction])
    if target is state.formulation:
        return state
    grid, n = state.grid, state.grid.n
    a = lp_besov.inverse(state.coeffs[0], n)
    _check_positivity(a, params, positivity_floor)
    if not np.any(state.coeffs[0]):
        return State(grid, state.coeffs.copy(), target)
    rho = 1.0 + params.eps * a
    if target is Formulation.MOMENTUM:
        vel = lp_besov.inverse(state.coeffs[1:], n)
        new_vel = lp_besov.forward(vel * rho) * dealias_mask(grid)
    else:
        new_vel = _divide_on_retained(state.coeffs[1:], rho, grid)
    coeffs = np.concatenate([state.coeffs[:1], new_vel], axis=0)
    return State(grid, coeffs, target)


def velocity_of(state: State, params: FluidParams) -> SpectralField:
    return convert(state, params, Formulation.VELOCITY, positivity_floor=1e-12).vel


def momentum_of(state: State, params: FluidParams) -> SpectralField:
    return convert(state, params, Formulation.MOMENTUM, positivity_floor=1e-12).vel


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def max_retained_wavenumber(grid: TorusGrid, dealiased: bool = True) -> float:
    k = grid.wavenumber
    return float(k[dealias_mask(grid)].max() if dealiased else k.max())


def check_time_step(grid: TorusGrid, params: FluidParams, cfg: StepperConfig) -> None:
    if cfg.scheme != 2:
        return
    limit = 0.5 * params.eps / max_retained_wavenumber(grid, cfg.dealias)
    if cfg.dt > limit * (1 + 1e-12):
        raise ConstraintError("dt <= 0.5 eps / max|xi|", f"dt={cfg.dt:.6g} limit={limit:.6g}")


class LawsonStepper:
    """Exponential Runge-Kutta stepper with the exact per-mode linear flow."""

    def __init__(self, grid: TorusGrid, params: FluidParams, cfg: StepperConfig):
        check_time_step(grid, params, cfg)
        self.grid = grid
        self.params = params
        self.cfg = cfg
        self._phi: dict[float, np.ndarray] = {}

    def phi(self, h: float) -> np.ndarray:
        if h not in self._phi:
            self._phi[h] = linsymbol.propagator_field(self.grid, self.params, h)
        return self._phi[h]

    def linear(self, h: float, coeffs: np.ndarray) -> np.ndarray:
        return linsymbol.apply_propagator(self.phi(h), coeffs)

    def rhs(self, state: State, coeffs: np.ndarray) -> np.ndarray:
        if not self.cfg.nonlinear:
            return np.zeros_like(coeffs)
        return nonlinearity(
            state.with_coeffs(coeffs),
            self.params,
            dealiased=self.cfg.dealias,
            positivity_floor=self.cfg.positivity_floor,
        )

    def step(self, state: State, dt: float | None = None) -> State:
        h = self.cfg.dt if dt is None else dt
        U = state.coeffs
        if self.cfg.scheme == 2:
            k1 = self.rhs(state, U)
            U_pred = self.linear(h, U + h * k1)
            k2 = self.rhs(state, U_pred)
            out = self.linear(h, U + 0.5 * h * k1) + 0.5 * h * k2
        else:
            half = 0.5 * h
            k1 = self.rhs(state, U)
            k2 = self.rhs(state, self.linear(half, U + half * k1))
            U_half = self.linear(half, U)
            k3 = self.rhs(state, U_half + half * k2)
            k4 = self.rhs(state, self.linear(h, U) + h * self.linear(half, k3))
            out = (
                self.linear(h, U + (h / 6.0) * k1)
                + (h / 3.0) * self.linear(half, k2 + k3)
                + (h / 6.0) * k4
            )
        return state.with_coeffs(out)


def step(state: State, params: FluidParams, cfg: StepperConfig) -> State:
    return LawsonStepper(state.grid, params, cfg).step(state)


@dataclass
class RunReport:
    formulation: str
    steps: int = 0
    stable: bool = True
    failure_time: float | None = None
    failure_reason: str = ""
    positivity: list[tuple[float, float]] = field(default_factory=list)
    mean_a_initial: float = 0.0
    mean_a_final: float = 0.0

    @property
    def mean_drift(self) -> float:
        return abs(self.mean_a_final - self.mean_a_initial)

    @property
    def min_margin(self) -> float:
        return min((m for _, m in self.positivity), default=math.nan)

    def as_dict(self) -> dict:
        return {
            "formulation": self.formulation,
            "steps": self.steps,
            "stable": self.stable,
            "failure_time": self.failure_time,
            "failure_reason": self.failure_reason,
            "min_margin": self.min_margin,
            "mean_a_initial": self.mean_a_initial,
            "mean_a_final": self.mean_a_final,
            "mean_drift": self.mean_drift,
        }


@dataclass(eq=False)
class RunSeries:
    times: np.ndarray
    states: tuple[State, ...]
    params: FluidParams
    report: RunReport

    @property
    def grid(self) -> TorusGrid:
        return self.states[0].grid

    @property
    def final(self) -> State:
        return self.states[-1]

    def field_series(self, kind: str = "au", r: float = math.inf) -> lp_besov.TimeSeries:
        """``TimeSeries`` of ``a``, ``u``, ``m`` or the joint ``au`` field."""
        if kind == "a":
            snaps = [s.a for s in self.states]
        elif kind == "u":
            snaps = [velocity_of(s, self.params) for s in self.states]
        elif kind == "m":
            snaps = [momentum_of(s, self.params) for s in self.states]
        elif kind == "au":
            snaps = [lp_besov.stack_fields(s.a, velocity_of(s, self.params)) for s in self.states]
        else:
            raise ConstraintError("series kind in a|u|m|au", kind)
        return lp_besov.TimeSeries(self.times, tuple(snaps), r)

    def until(self, t: float) -> "RunSeries":
        count = max(1, int(np.searchsorted(self.times, t * (1 + 1e-12), side="right")))
        return RunSeries(self.times[:count], self.states[:count], self.params, self.report)


def simulate(
    initial: State,
    params: FluidParams,
    cfg: StepperConfig,
    T: float,
    *,
    on_snapshot: Callable[[float, State], None] | None = None,
) -> RunSeries:
    """March to ``T`` and keep every ``snapshot_every``-th state (plus the last).

    On instability the partial series is attached to the raised error.
    """
    if not T > 0:
        raise ConstraintError("T > 0", f"T={T}")
    stepper = LawsonStepper(initial.grid, params, cfg)
    state = dealias_state(initial) if cfg.dealias else initial
    report = RunReport(formulation=state.formulation.value, mean_a_initial=state.mean_a())
    report.positivity.append((0.0, state.density_margin(params.eps)))
    times, states = [0.0], [state]
    if on_snapshot:
        on_snapshot(0.0, state)

    steps = max(1, math.ceil(T / cfg.dt - 1e-9))
    logger.info(
        "simulate_start n=%s formulation=%s scheme=%s dt=%.6g steps=%s Omega=%.6g eps=%.6g",
        initial.grid.n, state.formulation.value, cfg.scheme, cfg.dt, steps, params.Omega, params.eps,
    )
    t = 0.0
    for index in range(1, steps + 1):
        h = cfg.dt if index < steps else T - cfg.dt * (steps - 1)
        try:
            state = stepper.step(state, h)
        except PositivityError as exc:
            _fail(report, t, str(exc), times, states, params)
            raise PositivityError(str(exc), failure_time=t, partial=_partial(times, states, params, report)) from exc
        t = T if index == steps else index * cfg.dt
        report.steps = index
        if not np.all(np.isfinite(state.coeffs)):
            _fail(report, t, "non-finite coefficients", times, states, params)
            raise InstabilityError(
                f"non-finite coefficients at t={t:.6g}", failure_time=t, partial=_partial(times, states, params, report)
            )
        margin = state.density_margin(params.eps)
        if index % cfg.snapshot_every == 0 or index == steps:
            report.positivity.append((t, margin))
            times.append(t)
            states.append(state)
            if on_snapshot:
                on_snapshot(t, state)
        if not margin > cfg.positivity_floor:
            message = f"density margin {margin:.6g} below floor {cfg.positivity_floor:.6g}"
            _fail(report, t, message, times, states, params)
            raise PositivityError(message, failure_time=t, partial=_partial(times, states, params, report))
    report.mean_a_final = state.mean_a()
    logger.info(
        "simulate_done steps=%s min_margin=%.6g mean_drift=%.3e", report.steps, report.min_margin, report.mean_drift
    )
    return RunSeries(np.asarray(times), tuple(states), params, report)


def _fail(report: RunReport, t: float, reason: str, times, states, params) -> None:
    report.stable = False
    report.failure_time = t
    report.failure_reason = reason
    report.mean_a_final = states[-1].mean_a()
    logger.warning("step_unstable t=%.6g reason=%s snapshots=%s", t, reason, len(times))


def _partial(times, states, params, report) -> RunSeries:
    return RunSeries(np.asarray(times), tuple(states), params, report)


def dealias_state(state: State) -> State:
    return state.with_coeffs(state.coeffs * dealias_mask(state.grid))


def linear_series(initial: State, params: FluidParams, times: Sequence[float]) -> list[State]:
    """Exact per-mode linear evolution of ``initial`` (velocity variables)."""
    state = convert(initial, params, Formulation.VELOCITY) if initial.formulation is Formulation.MOMENTUM else initial
    series = linsymbol.evolve_series(state.joint, params, times)
    return [State(state.grid, snap.coeffs, Formulation.VELOCITY) for snap in series.snapshots]


def linear_exact_solution(initial: State, params: FluidParams, t: float) -> State:
    return linear_series(initial, params, [0.0, t] if t > 0 else [0.0])[-1]


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)[0])


def l2_distance(first: np.ndarray, second: np.ndarray, n: int) -> float:
    return lp_besov.lp_norm(lp_besov.inverse(first - second, n), 2)


@dataclass
class ConvergenceReport:
    name: str
    steps: list[float]
    errors: list[float]
    slope: float | None

    @property
    def decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.errors, self.errors[1:]))

    def as_dict(self) -> dict:
        return {"name": self.name, "steps": self.steps, "errors": self.errors, "slope": self.slope, "decreasing": self.decreasing}


def linear_limit_study(
    initial: State, params: FluidParams, cfg: StepperConfig, T: float, factors: Sequence[float] = (1e-1, 1e-2, 1e-3)
) -> ConvergenceReport:
    """Distance of the nonlinear run from the exact linear flow for data ``factor * initial``.

    The nonlinear correction is quadratic, so the log-log slope is 2.
    """
    errors = []
    for factor in factors:
        data = dealias_state(initial.scaled(factor))
        run = simulate(data, params, cfg, T)
        exact = linear_exact_solution(data, params, T)
        final = convert(run.final, params, Formulation.VELOCITY)
        errors.append(l2_distance(final.coeffs, exact.coeffs, initial.grid.n))
    slope = loglog_slope(factors, errors) if all(e > 0 for e in errors) else None
    logger.info("linear_limit_study T=%.6g errors=%s slope=%s", T, errors, slope)
    return ConvergenceReport("linear limit", list(factors), errors, slope)


def _halvings(cfg: StepperConfig, halvings: int) -> list[StepperConfig]:
    return [
        StepperConfig(cfg.dt / 2**k, cfg.scheme, cfg.dealias, 10**9, cfg.positivity_floor, cfg.nonlinear)
        for k in range(halvings)
    ]


def self_convergence_study(initial: State, params: FluidParams, cfg: StepperConfig, T: float, halvings: int = 3) -> ConvergenceReport:
    """Errors against a run with a quarter of the finest step; the slope is the observed order."""
    configs = _halvings(cfg, halvings + 2)
    reference = simulate(initial, params, configs[-1], T).final.coeffs
    steps, errors = [], []
    for c in configs[:halvings]:
        steps.append(c.dt)
        errors.append(l2_distance(simulate(initial, params, c, T).final.coeffs, reference, initial.grid.n))
    slope = loglog_slope(steps, errors) if all(e > 0 for e in errors) else None
    logger.info("self_convergence scheme=%s errors=%s order=%s", cfg.scheme, errors, slope)
    return ConvergenceReport(f"self convergence (scheme {cfg.scheme})", steps, errors, slope)


def formulation_study(initial: State, params: FluidParams, cfg: StepperConfig, T: float, halvings: int = 3) -> ConvergenceReport:
    """``||a_vel - a_mom||_{L^2}`` for velocity and momentum runs from the same data at each step size."""
    velocity = convert(initial, params, Formulation.VELOCITY)
    momentum = convert(velocity, params, Formulation.MOMENTUM)
    steps, errors = [], []
    for c in _halvings(cfg, halvings + 1):
        a_vel = simulate(velocity, params, c, T).final.coeffs[0]
        a_mom = simulate(momentum, params, c, T).final.coeffs[0]
        steps.append(c.dt)
        errors.append(l2_distance(a_vel, a_mom, initial.grid.n))
    slope = loglog_slope(steps, errors) if all(e > 0 for e in errors) else None
    logger.info("formulation_study errors=%s", errors)
    return ConvergenceReport("velocity vs momentum", steps, errors, slope)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

RECIPES = ("random-band", "gaussian-bump", "single-mode", "large-data")


@dataclass(frozen=True)
class DataRecipe:
    name: str = "random-band"
    amplitude: float = 0.1
    seed: int = 0
    band: int = 0
    bands: tuple[int, ...] | None = None
    density_fraction: float = 0.5

    def __post_init__(self):
        if self.name not in RECIPES:
            raise ConstraintError("recipe in " + "|".join(RECIPES), self.name)
        if not self.amplitude >= 0:
            raise ConstraintError("amplitude >= 0", f"amplitude={self.amplitude}")


def _dealiased_bands(grid: TorusGrid, part: lp_besov.DyadicPartition) -> list[int]:
    limit = (grid.n / 3.0) * grid.k0
    return [j for j in part.bands if 2.0 ** (j + 1) <= limit]


def make_initial_data(
    recipe: DataRecipe,
    grid: TorusGrid,
    params: FluidParams,
    part: lp_besov.DyadicPartition | None = None,
    *,
    positivity_floor: float = 0.05,
) -> State:
    rng = np.random.default_rng(recipe.seed)
    A = recipe.amplitude
    if recipe.name == "single-mode":
        k = 2.0**recipe.band / grid.k0
        if abs(k - round(k)) > 1e-12 or round(k) > grid.n / 3.0 or round(k) < 1:
            raise GridError("2^j is a retained grid wavenumber", f"j={recipe.band} k={k:.6g}")
        x1, x2, _ = grid.coordinates()
        a = A * np.cos(2.0**recipe.band * x1)
        u = np.zeros((3,) + grid.shape)
        u[0] = A * np.cos(2.0**recipe.band * x2)
        state = State.from_fields(SpectralField.from_physical(grid, a), SpectralField.from_physical(grid, u))
    elif recipe.name == "gaussian-bump":
        x1, x2, x3 = grid.coordinates()
        c = grid.length / 2.0
        w = grid.length / 12.0
        envelope = np.exp(-((x1 - c) ** 2 + (x2 - c) ** 2 + (x3 - c) ** 2) / (2.0 * w**2))
        u = np.stack([-(x2 - c) / w * envelope, (x1 - c) / w * envelope, np.zeros_like(envelope)])
        a_field = SpectralField.from_physical(grid, envelope).mean_free()
        u_field = SpectralField.from_physical(grid, u).mean_free()
        state = dealias_state(State.from_fields(a_field, u_field))
        state = state.scaled(_joint_l2_scale(state, A))
    else:
        part = part or lp_besov.make_partition(grid)
        bands = list(recipe.bands) if recipe.bands else _dealiased_bands(grid, part)
        if not bands:
            raise GridError("a dyadic band fits below the 2/3 cut", f"n={grid.n}")
        a_field = dealias(lp_besov.random_band_field(grid, part, rng, bands))
        u_field = dealias(lp_besov.random_band_field(grid, part, rng, bands, components=3))
        if recipe.name == "random-band":
            state = State.from_fields(a_field, u_field)
            state = state.scaled(_joint_l2_scale(state, A))
        else:
            half = lp_besov.BesovSpec(0.5, 2.0, 1.0)
            u_norm = lp_besov.besov_norm(u_field, half, part)
            a_norm = lp_besov.besov_norm(a_field, half, part)
            if u_norm == 0 or a_norm == 0:
                raise GridError("target norm reachable on the grid", f"bands={bands}")
            state = State.from_fields(
                a_field.scaled(recipe.density_fraction * A / a_norm), u_field.scaled(A / u_norm)
            )
    margin = state.density_margin(params.eps)
    if not margin > positivity_floor:
        raise GridError(
            "target norm reachable with 1 + eps a above the floor",
            f"margin={margin:.6g} floor={positivity_floor:.6g}",
        )
    logger.info("initial_data recipe=%s amplitude=%.6g seed=%s margin=%.6g", recipe.name, A, recipe.seed, margin)
    return state


def _joint_l2_scale(state: State, amplitude: float) -> float:
    norm = lp_besov.lp_norm(lp_besov.inverse(state.coeffs, state.grid.n), 2)
    if norm == 0:
        raise GridError("target norm reachable on the grid", "zero field")
    return amplitude / norm


def data_norms(state: State, part: lp_besov.DyadicPartition) -> dict[str, float]:
    """Besov norms reported alongside generated data."""
    a, u = state.a, state.vel
    return {
        "a_B-3/2_2inf": lp_besov.besov_norm(a, lp_besov.BesovSpec(-1.5, 2, math.inf), part),
        "a_B1/2_21": lp_besov.besov_norm(a, lp_besov.BesovSpec(0.5, 2, 1), part),
        "a_B3/2_21": lp_besov.besov_norm(a, lp_besov.BesovSpec(1.5, 2, 1), part),
        "u_B-3/2_2inf": lp_besov.besov_norm(u, lp_besov.BesovSpec(-1.5, 2, math.inf), part),
        "u_B1/2_21": lp_besov.besov_norm(u, lp_besov.BesovSpec(0.5, 2, 1), part),
    }


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"NSCSNAP1"
_HEADER = struct.Struct("<9d")
_HASH_BYTES = 64


def write_snapshot(path: Path, state: State, t: float, params: FluidParams, config_hash: str = "") -> Path:
    """Header ``(n, L, t, mu, mu', Omega, eps, gamma, formulation)`` then ``<c16`` coefficients."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gamma = params.pressure.gamma if params.pressure.is_gamma_law else math.nan
    header = _HEADER.pack(
        float(state.grid.n), state.grid.length, float(t), params.mu, params.mu_prime,
        params.Omega, params.eps, gamma, float(state.formulation.code),
    )
    digest = config_hash.encode("ascii")[:_HASH_BYTES].ljust(_HASH_BYTES, b" ")
    with path.open("wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(header)
        fh.write(digest)
        fh.write(np.ascontiguousarray(state.coeffs, dtype="<c16").tobytes())
    return path


@dataclass
class Snapshot:
    state: State
    t: float
    params: dict
    config_hash: str


def read_snapshot(path: Path) -> Snapshot:
    data = Path(path).read_bytes()
    if not data.startswith(SNAPSHOT_MAGIC):
        raise ConstraintError("snapshot magic", str(path))
    offset = len(SNAPSHOT_MAGIC)
    n, length, t, mu, mu_prime, Omega, eps, gamma, code = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    config_hash = data[offset : offset + _HASH_BYTES].decode("ascii").strip()
    offset += _HASH_BYTES
    grid = TorusGrid(int(n), length)
    coeffs = np.frombuffer(data, dtype="<c16", offset=offset).reshape((4,) + grid.spectral_shape)
    formulation = Formulation.VELOCITY if int(code) == 0 else Formulation.MOMENTUM
    params = {"mu": mu, "mu_prime": mu_prime, "Omega": Omega, "eps": eps, "gamma": None if math.isnan(gamma) else gamma}
    return Snapshot(State(grid, coeffs.copy(), formulation), t, params, config_hash)


def write_manifest(directory: Path, entries: Sequence[dict], metadata: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    payload = dict(metadata)
    payload["snapshots"] = list(entries)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=json_default))
    return path


def json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not serializable: {type(value).__name__}")


class SnapshotWriter:
    """Collects snapshot files for one run; used as ``simulate(on_snapshot=...)``."""

    def __init__(self, directory: Path, params: FluidParams, config_hash: str = ""):
        self.directory = Path(directory)
        self.params = params
        self.config_hash = config_hash
        self.entries: list[dict] = []

    def __call__(self, t: float, state: State) -> None:
        name = f"snap_{len(self.entries):05d}.bin"
        write_snapshot(self.directory / "snapshots" / name, state, t, self.params, self.config_hash)
        self.entries.append({"index": len(self.entries), "t": float(t), "path": f"snapshots/{name}"})

    def finish(self, metadata: dict) -> Path:
        return write_manifest(self.directory, self.entries, metadata)
