"""Linearized system per Fourier mode.

The state vector of a mode is ordered ``(a, u1, u2, u3)`` everywhere (arrays,
CSV columns and snapshot files). The linear flow is ``dU/dt = -A(xi) U``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.integrate import quad_vec, solve_ivp, trapezoid
from scipy.optimize import linear_sum_assignment

from . import lp_besov
from .errors import ConstraintError, DecayViolation, GridError, SpectralMismatchError

logger = logging.getLogger(__name__)

EXPM_COND_LIMIT = 1e8

ROOT_ABS_TOL = 1e-8
ROOT_REL_TOL = 1e-6


def configure_expm(cond_limit: float | None) -> None:
    global EXPM_COND_LIMIT
    if cond_limit:
        EXPM_COND_LIMIT = float(cond_limit)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PressureLaw:
    """``P(rho) = rho^gamma / gamma`` or a user supplied ``(P, P', P'')`` triple."""

    gamma: float | None = 1.4
    P: Callable[[np.ndarray], np.ndarray] | None = None
    dP: Callable[[np.ndarray], np.ndarray] | None = None
    d2P: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        custom = (self.P, self.dP, self.d2P)
        if self.gamma is None:
            if any(fn is None for fn in custom):
                raise ConstraintError("custom pressure law supplies P, P' and P''")
        else:
            if any(fn is not None for fn in custom):
                raise ConstraintError("either gamma or a custom (P, P', P'') triple")
            if not self.gamma > 1:
                raise ConstraintError("gamma > 1", f"gamma={self.gamma}")
        if abs(float(self.pressure_derivative(1.0, 1)) - 1.0) > 1e-12:
            raise ConstraintError("P'(1) = 1", f"P'(1)={float(self.pressure_derivative(1.0, 1)):.12g}")

    @property
    def is_gamma_law(self) -> bool:
        return self.gamma is not None

    def pressure(self, rho):
        if self.is_gamma_law:
            return np.asarray(rho, dtype=float) ** self.gamma / self.gamma
        return self.P(rho)

    def pressure_derivative(self, rho, order: int):
        """``P^(order)(rho)``; exact for the gamma law, finite differences of P'' beyond order 2."""
        if self.is_gamma_law:
            coefficient = math.prod(self.gamma - k for k in range(1, order))
            return coefficient * np.asarray(rho, dtype=float) ** (self.gamma - order)
        if order == 0:
            return self.P(rho)
        if order == 1:
            return self.dP(rho)
        if order == 2:
            return self.d2P(rho)
        h = 1e-3
        offsets = np.arange(order - 2 + 1) - (order - 2) / 2.0
        weights = np.array([(-1) ** (order - 2 - k) * math.comb(order - 2, k) for k in range(order - 1)])
        samples = np.array([self.d2P(np.asarray(rho, dtype=float) + h * o) for o in offsets])
        return np.tensordot(weights, samples, axes=1) / h ** (order - 2)

    def derivatives_at_one(self, count: int = 5) -> tuple[float, ...]:
        return tuple(float(self.pressure_derivative(1.0, k)) for k in range(1, count + 1))

    def label(self) -> str:
        return f"gamma={self.gamma:.6g}" if self.is_gamma_law else "custom"


@dataclass(frozen=True)
class FluidParams:
    mu: float
    mu_prime: float
    Omega: float
    eps: float
    pressure: PressureLaw = field(default_factory=PressureLaw)

    def __post_init__(self):
        if not self.mu > 0:
            raise ConstraintError("mu > 0", f"mu={self.mu}")
        if abs(2.0 * self.mu + self.mu_prime - 1.0) > 1e-12:
            raise ConstraintError("2 mu + mu' = 1", f"mu={self.mu} mu'={self.mu_prime}")
        if not self.eps > 0:
            raise ConstraintError("eps > 0", f"eps={self.eps}")
        if not math.isfinite(self.Omega):
            raise ConstraintError("Omega finite", f"Omega={self.Omega}")

    @classmethod
    def from_mu(cls, mu: float, Omega: float, eps: float, gamma: float | None = 1.4, **kwargs) -> "FluidParams":
        pressure = kwargs.pop("pressure", None) or PressureLaw(gamma=gamma)
        return cls(mu=mu, mu_prime=1.0 - 2.0 * mu, Omega=Omega, eps=eps, pressure=pressure)

    @property
    def nu(self) -> float:
        return 2.0 * self.mu + self.mu_prime

    @property
    def mu_low(self) -> float:
        """``min(mu, 1)``."""
        return min(self.mu, 1.0)

    @property
    def omega_eps(self) -> float:
        return abs(self.Omega) * self.eps

    def with_rotation(self, Omega: float, eps: float | None = None) -> "FluidParams":
        return FluidParams(self.mu, self.mu_prime, Omega, self.eps if eps is None else eps, self.pressure)

    def as_dict(self) -> dict:
        return {
            "mu": self.mu,
            "mu_prime": self.mu_prime,
            "Omega": self.Omega,
            "eps": self.eps,
            "gamma": self.pressure.gamma,
        }


# ---------------------------------------------------------------------------
# symbol, characteristic polynomial, eigenvalues
# ---------------------------------------------------------------------------

_CORIOLIS = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True, eq=False)
class ModeSymbol:
    xi: np.ndarray
    matrix: np.ndarray

    @property
    def xi_norm(self) -> float:
        return float(np.linalg.norm(self.xi))


def symbol_matrices(xi: np.ndarray, params: FluidParams) -> np.ndarray:
    """``A(xi)`` for a batch of frequencies ``xi`` of shape ``(..., 3)``."""
    xi = np.asarray(xi, dtype=float)
    k2 = np.sum(xi * xi, axis=-1)
    A = np.zeros(xi.shape[:-1] + (4, 4), dtype=complex)
    coupling = 1j * xi / params.eps
    A[..., 0, 1:] = coupling
    A[..., 1:, 0] = coupling
    A[..., 1:, 1:] = (
        params.mu * k2[..., None, None] * np.eye(3)
        + (params.mu + params.mu_prime) * xi[..., :, None] * xi[..., None, :]
        + params.Omega * _CORIOLIS
    )
    return A


def symbol_matrix(xi: Sequence[float], params: FluidParams) -> ModeSymbol:
    xi = np.asarray(xi, dtype=float).reshape(3)
    return ModeSymbol(xi=xi, matrix=symbol_matrices(xi, params))


def characteristic_quartic(xi: Sequence[float], params: FluidParams) -> np.ndarray:
    """Coefficients of ``det(lambda I - A(xi))``, highest degree first."""
    xi = np.asarray(xi, dtype=float).reshape(3)
    k2 = float(xi @ xi)
    x3 = float(xi[2]) ** 2
    mu, mup, W2, e2 = params.mu, params.mu_prime, params.Omega**2, params.eps**2
    return np.array(
        [
            1.0,
            -(4.0 * mu + mup) * k2,
            k2 / e2 + mu * (5.0 * mu + 2.0 * mup) * k2**2 + W2,
            -(2.0 * mu * k2**2 / e2 + mu**2 * k2**3 + W2 * mu * k2 + W2 * (mu + mup) * x3),
            mu**2 * k2**3 / e2 + W2 * x3 / e2,
        ]
    )


def matrix_charpoly(matrix: np.ndarray) -> np.ndarray:
    """``det(lambda I - M)`` by permutation expansion; independent of any eigensolver."""
    M = np.asarray(matrix, dtype=complex)
    size = M.shape[0]
    total = np.zeros(size + 1, dtype=complex)
    for perm in itertools.permutations(range(size)):
        sign = _permutation_sign(perm)
        term = np.array([1.0 + 0j])
        for row, col in enumerate(perm):
            entry = np.array([1.0, -M[row, col]]) if row == col else np.array([-M[row, col]])
            term = np.polymul(term, entry)
        total[size + 1 - term.size :] += sign * term
    return total


def _permutation_sign(perm: Sequence[int]) -> int:
    sign = 1
    seen = list(perm)
    for i in range(len(seen)):
        while seen[i] != i:
            j = seen[i]
            seen[i], seen[j] = seen[j], seen[i]
            sign = -sign
    return sign


def quartic_factorization_without_rotation(xi: Sequence[float], params: FluidParams) -> np.ndarray:
    """``(lambda - mu|xi|^2)^2 (lambda^2 - nu|xi|^2 lambda + |xi|^2/eps^2)``."""
    k2 = float(np.dot(xi, xi))
    shear = np.array([1.0, -params.mu * k2])
    acoustic = np.array([1.0, -params.nu * k2, k2 / params.eps**2])
    return np.polymul(np.polymul(shear, shear), acoustic)


def sort_spectrum(values: Iterable[complex]) -> np.ndarray:
    values = np.asarray(list(values), dtype=complex)
    scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
    re = np.round(values.real / scale, 10)
    order = np.lexsort((values.imag, re))
    return values[order]


def _polish_roots(coeffs: np.ndarray, roots: np.ndarray) -> np.ndarray:
    """A few Newton steps on ``p`` (on ``p'`` for clustered pairs)."""
    p = np.poly1d(coeffs)
    dp = p.deriv()
    d2p = dp.deriv()
    polished = roots.astype(complex).copy()
    for i, root in enumerate(polished):
        z = root
        for _ in range(3):
            slope = dp(z)
            if abs(slope) <= 1e-300:
                break
            step = p(z) / slope
            if not np.isfinite(step):
                break
            z = z - step
        if abs(p(z)) <= abs(p(root)):
            polished[i] = z
    scale = max(1.0, float(np.max(np.abs(polished))))
    for i, j in itertools.combinations(range(len(polished)), 2):
        if abs(polished[i] - polished[j]) > 1e-6 * scale:
            continue
        center = 0.5 * (polished[i] + polished[j])
        for _ in range(3):
            curvature = d2p(center)
            if abs(curvature) <= 1e-300:
                break
            center = center - dp(center) / curvature
        curvature = d2p(center)
        if abs(curvature) <= 1e-300:
            continue
        half_split = np.sqrt(-2.0 * p(center) / curvature)
        pair = np.array([center + half_split, center - half_split])
        if np.all(np.abs(p(pair)) <= np.abs(p(polished[[i, j]])) + 1e-300):
            polished[i], polished[j] = pair
    return polished


def match_spectra(first: np.ndarray, second: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Pair two spectra by minimum total distance; return the permutation, worst deviation and agreement."""
    cost = np.abs(first[:, None] - second[None, :])
    rows, cols = linear_sum_assignment(cost)
    deviations = np.abs(first[rows] - second[cols])
    magnitudes = np.maximum(np.abs(first[rows]), np.abs(second[cols]))
    ok = bool(np.all((deviations <= ROOT_ABS_TOL) | (deviations <= ROOT_REL_TOL * magnitudes)))
    return cols, float(deviations.max()) if deviations.size else 0.0, ok


def eigenvalues(xi: Sequence[float], params: FluidParams) -> np.ndarray:
    """Eigenvalues of ``A(xi)`` cross-checked against the quartic's roots."""
    xi = np.asarray(xi, dtype=float).reshape(3)
    coeffs = characteristic_quartic(xi, params)
    roots = _polish_roots(coeffs, np.roots(coeffs))
    roots = np.concatenate([roots, np.zeros(4 - roots.size, dtype=complex)])
    matrix_values = np.linalg.eigvals(symbol_matrix(xi, params).matrix)
    _, deviation, ok = match_spectra(roots, matrix_values)
    if not ok:
        logger.warning("eigen_mismatch xi=%s deviation=%.3e", list(xi), deviation)
        raise SpectralMismatchError(xi, sort_spectrum(roots), sort_spectrum(matrix_values), deviation)
    return sort_spectrum(matrix_values)


# ---------------------------------------------------------------------------
# propagator
# ---------------------------------------------------------------------------


def propagators(A: np.ndarray, t: float, *, cond_limit: float | None = None) -> np.ndarray:
    """``exp(-t A)`` for a batch of 4x4 matrices.

    Eigendecomposition first; batches whose eigenvector matrix is worse
    conditioned than ``cond_limit`` go through ``scipy.linalg.expm``.
    """
    if t < 0:
        raise ConstraintError("t >= 0", f"t={t}")
    A = np.asarray(A, dtype=complex)
    flat = A.reshape(-1, 4, 4)
    out = np.empty_like(flat)
    if t == 0:
        out[:] = np.eye(4)
        return out.reshape(A.shape)
    limit = EXPM_COND_LIMIT if cond_limit is None else cond_limit
    values, vectors = np.linalg.eig(flat)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(vectors)
    good = np.isfinite(cond) & (cond <= limit)
    if np.any(good):
        V = vectors[good]
        Vinv = np.linalg.inv(V)
        out[good] = (V * np.exp(-t * values[good])[:, None, :]) @ Vinv
    bad = ~good
    if np.any(bad):
        logger.debug("propagator_fallback count=%s t=%.6g", int(bad.sum()), t)
        out[bad] = sla.expm(-t * flat[bad])
    return out.reshape(A.shape)


def propagator(t: float, xi: Sequence[float], params: FluidParams) -> np.ndarray:
    return propagators(symbol_matrix(xi, params).matrix, t)


def grid_symbols(grid: lp_besov.TorusGrid, params: FluidParams) -> np.ndarray:
    return symbol_matrices(np.moveaxis(grid.wavevector, 0, -1), params)


def propagator_field(grid: lp_besov.TorusGrid, params: FluidParams, t: float) -> np.ndarray:
    """``Phi(t; xi)`` for every stored mode, shape ``spectral_shape + (4, 4)``.

    The mean mode gets the exact rotation so the mean of ``a`` stays untouched.
    """
    phi = propagators(grid_symbols(grid, params), t)
    phi[0, 0, 0] = rotation_propagator(params.Omega, t)
    return phi


def rotation_propagator(Omega: float, t: float) -> np.ndarray:
    """``exp(-t A(0))``: rotation of ``(u1, u2)`` by ``-Omega t``."""
    c, s = math.cos(Omega * t), math.sin(Omega * t)
    return np.array(
        [[1, 0, 0, 0], [0, c, s, 0], [0, -s, c, 0], [0, 0, 0, 1]],
        dtype=complex,
    )


def apply_propagator(phi: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply per-mode 4x4 matrices to coefficients stored as ``(4,) + spectral_shape``."""
    return np.einsum("...ij,j...->i...", phi, coeffs)


def evolve_field(field4: lp_besov.SpectralField, params: FluidParams, t: float) -> lp_besov.SpectralField:
    if field4.components != 4:
        raise ConstraintError("joint (a, u) field", f"components={field4.components}")
    phi = propagator_field(field4.grid, params, t)
    return lp_besov.SpectralField(field4.grid, apply_propagator(phi, field4.coeffs))


def evolve_series(
    field4: lp_besov.SpectralField,
    params: FluidParams,
    times: Sequence[float],
    r: float = math.inf,
) -> lp_besov.TimeSeries:
    """Exact linear evolution sampled at ``times`` (one eigendecomposition for all of them)."""
    times = np.asarray(times, dtype=float)
    A = grid_symbols(field4.grid, params).reshape(-1, 4, 4)
    values, vectors = np.linalg.eig(A)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(vectors)
    good = np.isfinite(cond) & (cond <= EXPM_COND_LIMIT)
    flat = field4.coeffs.reshape(4, -1).T
    projected = np.zeros_like(flat)
    projected[good] = np.linalg.solve(vectors[good], flat[good][..., None])[..., 0]
    snapshots = []
    for t in times:
        out = np.empty_like(flat)
        out[good] = np.einsum("mij,mj->mi", vectors[good], np.exp(-t * values[good]) * projected[good])
        if np.any(~good):
            out[~good] = np.einsum("mij,mj->mi", sla.expm(-t * A[~good]), flat[~good])
        out[0] = rotation_propagator(params.Omega, t) @ flat[0]
        snapshots.append(lp_besov.SpectralField(field4.grid, out.T.reshape(field4.coeffs.shape)))
    return lp_besov.TimeSeries(times, tuple(snapshots), r)


# ---------------------------------------------------------------------------
# decay rate, energy functional, decay verification
# ---------------------------------------------------------------------------


def decay_rate_kappa(xi_norm: float, omega_eps: float) -> float:
    """``|xi|^4 / (Omega^2 eps^2 + |xi|^2)``."""
    if xi_norm == 0 and omega_eps == 0:
        raise ConstraintError("(|xi|, Omega eps) != (0, 0)")
    return xi_norm**4 / (omega_eps**2 + xi_norm**2)


@dataclass(frozen=True)
class EnergyFunctional:
    beta: float
    params: FluidParams

    def __post_init__(self):
        if not self.beta >= 1:
            raise ConstraintError("beta >= 1", f"beta={self.beta}")

    @property
    def delta(self) -> float:
        return self.params.mu_low / (16.0 * self.beta**2)

    @property
    def xi_limit(self) -> float:
        return 2.0 * self.beta / self.params.eps

    def weight(self, xi_norm: float) -> float:
        return self.params.omega_eps**2 + xi_norm**2

    def squared(self, U: Sequence[complex], xi: Sequence[float]) -> float:
        xi = np.asarray(xi, dtype=float).reshape(3)
        U = np.asarray(U, dtype=complex).reshape(4)
        xi_norm = float(np.linalg.norm(xi))
        if xi_norm > self.xi_limit * (1 + 1e-12):
            raise ConstraintError("|xi| <= 2 beta / eps", f"|xi|={xi_norm:.6g} limit={self.xi_limit:.6g}")
        a, u = U[0], U[1:]
        cross = np.vdot(u, 1j * self.params.eps * xi * a).real
        return float(self.weight(xi_norm) * np.vdot(U, U).real + 2.0 * self.delta * xi_norm**2 * cross)


def energy_V(U: Sequence[complex], xi: Sequence[float], params: FluidParams, beta: float) -> float:
    value = EnergyFunctional(beta, params).squared(U, xi)
    return math.sqrt(max(value, 0.0))


def guaranteed_rate(xi_norm: float, params: FluidParams, beta: float) -> float:
    """Decay rate ``mu_low * kappa / (48 beta^2)`` delivered by the energy argument."""
    return params.mu_low * decay_rate_kappa(xi_norm, params.omega_eps) / (48.0 * beta**2)


def energy_sandwich_check(params: FluidParams, beta: float, count: int, rng: np.random.Generator) -> dict:
    """Extremes of ``V^2 / ((Omega^2 eps^2 + |xi|^2) |U|^2)`` over random ``(U, xi)``; must lie in ``[1/2, 3/2]``."""
    functional = EnergyFunctional(beta, params)
    modes = sample_decay_modes(params, beta, count, rng)
    vectors = rng.normal(size=(count, 4)) + 1j * rng.normal(size=(count, 4))
    ratios = np.empty(count)
    for index, (xi, U) in enumerate(zip(modes, vectors)):
        scale = functional.weight(float(np.linalg.norm(xi))) * float(np.vdot(U, U).real)
        ratios[index] = functional.squared(U, xi) / scale
    low, high = float(ratios.min()), float(ratios.max())
    return {"min_ratio": low, "max_ratio": high, "samples": count, "ok": bool(low >= 0.5 and high <= 1.5)}


def propagator_contraction(params: FluidParams, modes: Sequence[Sequence[float]], times: Sequence[float]) -> float:
    """Largest ``||Phi(t)||_2`` over the given modes and times."""
    worst = 0.0
    for xi in modes:
        A = symbol_matrix(xi, params).matrix
        for t in times:
            worst = max(worst, float(np.linalg.norm(propagators(A, t), 2)))
    return worst


@dataclass
class ModeDecay:
    xi: np.ndarray
    kappa: float
    abscissa: float
    fitted_rate: float
    prefactor: float
    rate_bound: float
    horizon: float

    def row(self) -> dict:
        return {
            "xi1": float(self.xi[0]),
            "xi2": float(self.xi[1]),
            "xi3": float(self.xi[2]),
            "kappa": self.kappa,
            "abscissa": self.abscissa,
            "fitted_rate": self.fitted_rate,
            "prefactor": self.prefactor,
            "rate_bound": self.rate_bound,
            "horizon": self.horizon,
        }


DECAY_COLUMNS = ("xi1", "xi2", "xi3", "kappa", "abscissa", "fitted_rate", "prefactor", "rate_bound", "horizon")


def decay_horizon(real_parts: np.ndarray, bound: float, horizon: float | None = None) -> float:
    """Fit window end point.

    ``10 / bound`` capped at ``1e4``; stretched when needed so the slowest
    mode dominates its nearest neighbour by ``e^-40`` and never past 600
    e-foldings of the slowest mode.
    """
    if horizon is not None:
        return float(horizon)
    rates = np.sort(np.asarray(real_parts, dtype=float))
    slow = float(rates[0])
    faster = rates[rates > slow * (1 + 1e-9)]
    gap = float(faster[0] - slow) if faster.size else math.inf
    T = min(10.0 / bound, 1e4, 50.0 / slow)
    if gap > 0 and math.isfinite(gap):
        T = max(T, 40.0 / gap)
    return min(T, 600.0 / slow)


def fit_decay(xi: np.ndarray, params: FluidParams, T: float, samples: int = 32) -> tuple[float, float]:
    """Least-squares rate and prefactor of ``log ||Phi(t)||_2`` over ``[T/2, T]``."""
    times = np.linspace(0.5 * T, T, samples)
    A = symbol_matrix(xi, params).matrix
    norms = np.array([np.linalg.norm(propagators(A, t), 2) for t in times])
    slope, intercept = np.polyfit(times, np.log(norms), 1)
    return float(-slope), float(math.exp(intercept))


def verify_decay_bound(
    params: FluidParams,
    beta: float,
    modes: Sequence[Sequence[float]],
    horizon: float | None = None,
    *,
    raise_on_violation: bool = True,
) -> list[ModeDecay]:
    if not beta >= 1:
        raise ConstraintError("beta >= 1", f"beta={beta}")
    if params.omega_eps > beta / params.eps * (1 + 1e-12):
        raise ConstraintError("|Omega| eps <= beta / eps", f"Omega eps={params.omega_eps:.6g} beta/eps={beta / params.eps:.6g}")
    reports = []
    for xi in modes:
        xi = np.asarray(xi, dtype=float).reshape(3)
        xi_norm = float(np.linalg.norm(xi))
        if xi_norm == 0:
            raise ConstraintError("xi != 0")
        if xi_norm > 2.0 * beta / params.eps * (1 + 1e-12):
            raise ConstraintError("|xi| <= 2 beta / eps", f"|xi|={xi_norm:.6g}")
        kappa = decay_rate_kappa(xi_norm, params.omega_eps)
        bound = params.mu_low * kappa / (48.0 * beta**2)
        lam = eigenvalues(xi, params)
        abscissa = float(np.max(-lam.real))
        T = decay_horizon(lam.real, bound, horizon)
        rate, prefactor = fit_decay(xi, params, T)
        report = ModeDecay(xi, kappa, abscissa, rate, prefactor, bound, T)
        reports.append(report)
        violated = abscissa > -bound + 1e-12 or rate < bound * (1 - 1e-9)
        if violated:
            logger.error("decay_violation xi=%s bound=%.6e abscissa=%.6e fitted=%.6e", list(xi), bound, abscissa, rate)
            if raise_on_violation:
                raise DecayViolation(xi, bound, abscissa, rate)
    logger.info("decay_verified modes=%s beta=%s omega_eps=%.6g", len(reports), beta, params.omega_eps)
    return reports


def sample_decay_modes(params: FluidParams, beta: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random frequencies with ``0 < |xi| <= 2 beta / eps``, uniform in log radius."""
    radius_max = 2.0 * beta / params.eps
    radii = radius_max * 10.0 ** rng.uniform(-2.0, 0.0, size=count)
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    return directions * radii[:, None]


def fourth_order_slope(params: FluidParams, beta: float = 1.0, radii: Sequence[float] | None = None) -> tuple[float, list[ModeDecay]]:
    """Log-log slope of the fitted rate for horizontal modes at small ``|xi|``."""
    radii = np.geomspace(0.01, 0.1, 6) if radii is None else np.asarray(radii, dtype=float)
    modes = [(r, 0.0, 0.0) for r in radii]
    reports = verify_decay_bound(params, beta, modes)
    rates = np.array([rep.fitted_rate for rep in reports])
    slope, _ = np.polyfit(np.log(radii), np.log(rates), 1)
    return float(slope), reports


def write_decay_csv(reports: Sequence[ModeDecay], path: Path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DECAY_COLUMNS)
        for rep in reports:
            row = rep.row()
            writer.writerow([format_float(row[c]) for c in DECAY_COLUMNS])
    return path


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


# ---------------------------------------------------------------------------
# Strichartz measurement
# ---------------------------------------------------------------------------


@dataclass
class StrichartzResult:
    value: float
    horizon: float
    samples: int
    band: int
    q: float
    r: float
    clipped: bool


def recurrence_window(grid: lp_besov.TorusGrid, params: FluidParams, j: int) -> float:
    """Time for the fastest group velocity in band ``j`` to cross the box."""
    return grid.length / (1.0 / params.eps + abs(params.Omega) / 2.0 ** (j - 1))


def check_strichartz_exponents(q: float, r: float) -> None:
    if not (q >= 2 and r >= 2):
        raise ConstraintError("q, r >= 2", f"q={q} r={r}")
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    inv_r = 0.0 if math.isinf(r) else 1.0 / r
    if inv_q + inv_r > 0.5 + 1e-14:
        raise ConstraintError("1/q + 1/r <= 1/2", f"q={q} r={r}")
    if math.isinf(q) and r == 2:
        raise ConstraintError("(q, r) != (inf, 2)")


def strichartz_measure(
    params: FluidParams,
    q: float,
    r: float,
    j: int,
    data: lp_besov.SpectralField,
    horizon: float,
    *,
    beta: float = 1.0,
    part: lp_besov.DyadicPartition | None = None,
    min_samples: int = 64,
) -> StrichartzResult:
    """``||Delta_j (a, u)||_{L^r(0,T; L^q)}`` of the homogeneous linear flow."""
    check_strichartz_exponents(q, r)
    grid = data.grid
    part = part or lp_besov.make_partition(grid)
    if j not in part.bands:
        raise GridError("band inside the resolvable range", f"j={j} range={list(part.band_range)}")
    if not (params.omega_eps < 2.0**j <= beta / params.eps):
        raise ConstraintError(
            "|Omega| eps < 2^j <= beta / eps",
            f"Omega eps={params.omega_eps:.6g} 2^j={2.0**j:.6g} beta/eps={beta / params.eps:.6g}",
        )
    if data.components != 4:
        raise ConstraintError("joint (a, u) data", f"components={data.components}")
    window = recurrence_window(grid, params, j)
    T = float(horizon)
    clipped = T > window
    if clipped:
        logger.warning("strichartz_horizon_clipped requested=%.6g window=%.6g", T, window)
        T = window
    block = lp_besov.project_band(data, j, part)
    if not np.any(block.coeffs):
        return StrichartzResult(0.0, T, 0, j, q, r, clipped)

    A = grid_symbols(grid, params)
    support = np.any(block.coeffs != 0, axis=0)
    A_sup = A[support]
    values, vectors = np.linalg.eig(A_sup)
    omega_max = float(np.max(np.abs(values.imag))) if values.size else 0.0
    samples = max(min_samples, math.ceil(8.0 * omega_max * T / math.pi))
    times = np.linspace(0.0, T, samples + 1)
    projected = np.linalg.solve(vectors, block.coeffs[:, support].T[..., None])[..., 0]
    per_time = np.empty(times.size)
    coeffs = np.zeros_like(block.coeffs)
    for index, t in enumerate(times):
        evolved = np.einsum("mij,mj->mi", vectors, np.exp(-t * values) * projected)
        coeffs[:, support] = evolved.T
        per_time[index] = lp_besov.lp_norm(lp_besov.inverse(coeffs, grid.n), q)
    value = float(lp_besov.time_norm(per_time[:, None], times, r)[0])
    logger.info(
        "strichartz_measured j=%s q=%s r=%s Omega=%.6g T=%.6g samples=%s value=%.6e",
        j, q, r, params.Omega, T, samples, value,
    )
    return StrichartzResult(value, T, samples, j, q, r, clipped)


# ---------------------------------------------------------------------------
# Duhamel, per-block energy and high-frequency diagnostics
# ---------------------------------------------------------------------------


def duhamel_solution(
    xi: Sequence[float],
    params: FluidParams,
    U0: Sequence[complex],
    forcing: Callable[[float], np.ndarray],
    t: float,
) -> np.ndarray:
    """``Phi(t) U0 + int_0^t Phi(t - tau) f(tau) dtau`` by adaptive quadrature."""
    A = symbol_matrix(xi, params).matrix
    U0 = np.asarray(U0, dtype=complex).reshape(4)

    def integrand(tau):
        value = propagators(A, t - tau) @ np.asarray(forcing(tau), dtype=complex)
        return np.concatenate([value.real, value.imag])

    integral, _ = quad_vec(integrand, 0.0, t, epsabs=1e-13, epsrel=1e-12)
    return propagators(A, t) @ U0 + integral[:4] + 1j * integral[4:]


def duhamel_reference(
    xi: Sequence[float],
    params: FluidParams,
    U0: Sequence[complex],
    forcing: Callable[[float], np.ndarray],
    t: float,
) -> np.ndarray:
    """Stiff (Radau) integration of the real 8-dimensional form of the forced mode."""
    A = symbol_matrix(xi, params).matrix
    real_form = np.block([[-A.real, A.imag], [-A.imag, -A.real]])
    U0 = np.asarray(U0, dtype=complex).reshape(4)

    def rhs(tau, y):
        f = np.asarray(forcing(tau), dtype=complex)
        return real_form @ y + np.concatenate([f.real, f.imag])

    sol = solve_ivp(
        rhs,
        (0.0, t),
        np.concatenate([U0.real, U0.imag]),
        method="Radau",
        rtol=1e-12,
        atol=1e-14,
        jac=lambda tau, y: real_form,
    )
    if not sol.success:
        raise ConstraintError("reference integration converged", sol.message)
    y = sol.y[:, -1]
    return y[:4] + 1j * y[4:]


def mode_weights(grid: lp_besov.TorusGrid) -> np.ndarray:
    """Multiplicity of each stored half-spectrum mode in Parseval sums."""
    weights = np.full(grid.spectral_shape, 2.0)
    weights[..., 0] = 1.0
    weights[..., -1] = 1.0
    return weights


def simple_energy_check(
    data: lp_besov.SpectralField,
    params: FluidParams,
    times: Sequence[float],
    part: lp_besov.DyadicPartition | None = None,
) -> dict:
    """Per-block ratio ``(||Delta_j U||_{L^inf L^2} + ||Delta_j grad u||_{L^2 L^2}) / ||Delta_j U_0||_{L^2}``."""
    part = part or lp_besov.make_partition(data.grid)
    series = evolve_series(data, params, times)
    weights = mode_weights(data.grid)
    k2 = data.grid.wavenumber**2
    ratios = {}
    for j in part.bands:
        phi2 = part.multiplier(j) ** 2
        initial = math.sqrt(float(np.sum(weights * phi2 * np.sum(np.abs(data.coeffs) ** 2, axis=0))))
        if initial == 0.0:
            continue
        energy = []
        dissipation = []
        for snap in series.snapshots:
            c2 = np.abs(snap.coeffs) ** 2
            energy.append(math.sqrt(float(np.sum(weights * phi2 * np.sum(c2, axis=0)))))
            dissipation.append(float(np.sum(weights * phi2 * k2 * np.sum(c2[1:], axis=0))))
        lhs = max(energy) + math.sqrt(float(trapezoid(dissipation, series.times)))
        ratios[j] = lhs / initial
    return {"ratios": ratios, "max_ratio": max(ratios.values()) if ratios else 0.0}


def high_frequency_check(
    data: lp_besov.SpectralField,
    params: FluidParams,
    times: Sequence[float],
    *,
    s: float = 0.5,
    beta0: float = 1.0,
    part: lp_besov.DyadicPartition | None = None,
) -> dict:
    """Fitted constant of the linear high-frequency estimate above ``beta0 / eps``."""
    part = part or lp_besov.make_partition(data.grid)
    high = lp_besov.Truncation.high(beta0 / params.eps)
    eps = params.eps
    series = evolve_series(data, params, times)
    a_series = series.map(lambda f: f.component(slice(0, 1)))
    u_series = series.map(lambda f: f.component(slice(1, 4)))
    a_table = lp_besov.series_band_table(a_series, (2.0,), part)[2.0]
    u_table = lp_besov.series_band_table(u_series, (2.0,), part)[2.0]
    t = series.times
    lhs = (
        eps * lp_besov.chemin_lerner_from_table(a_table, t, math.inf, lp_besov.BesovSpec(s + 1, 2, 1, high), part)
        + lp_besov.lebesgue_from_table(a_table, t, 1.0, lp_besov.BesovSpec(s + 1, 2, 1, high), part) / eps
        + lp_besov.chemin_lerner_from_table(u_table, t, math.inf, lp_besov.BesovSpec(s, 2, 1, high), part)
        + lp_besov.lebesgue_from_table(u_table, t, 1.0, lp_besov.BesovSpec(s + 2, 2, 1, high), part)
    )
    a0 = data.component(slice(0, 1))
    u0 = data.component(slice(1, 4))
    rhs = lp_besov.besov_norm(a0.scaled(eps), lp_besov.BesovSpec(s + 1, 2, 1, high), part) + lp_besov.besov_norm(
        u0, lp_besov.BesovSpec(s, 2, 1, high), part
    )
    ratio = lhs / rhs if rhs > 0 else None
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio, "threshold": beta0 / eps}
