"""Littlewood-Paley blocks and homogeneous Besov / Chemin-Lerner norms on a periodic box.

Fields live on the torus ``[0, L)^3`` and are stored as ``scipy.fft.rfftn``
coefficients divided by ``n**3``; a mode ``cos(k.x)`` therefore carries the
coefficient 1/2 at ``+k`` (and its conjugate at ``-k``). Spatial ``L^p`` norms
use the normalized measure ``(1/L^3) dx`` so a single mode has unit ``L^inf``
norm.

Dyadic blocks are built from a smooth bump supported on ``1/2 <= |xi| <= 2``.
Only bands ``j`` with ``2^(j-1) >= 2*pi/L`` and ``2^(j+1) <= pi*n/L`` are
resolvable; every norm aggregates over resolvable bands only and treats the
rest as empty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy.integrate import trapezoid

from .errors import ConstraintError, GridError

logger = logging.getLogger(__name__)

_FFT_WORKERS = 1

BAND_EDGE_TOL = 1e-12


def configure_fft(workers: int | None) -> None:
    """Set the number of threads handed to ``scipy.fft``."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(workers or 1))


def fft_workers() -> int:
    return _FFT_WORKERS


def forward(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    return sfft.rfftn(values, axes=(-3, -2, -1), workers=_FFT_WORKERS) / float(n) ** 3


def inverse(coeffs: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfftn(coeffs * float(n) ** 3, s=(n, n, n), axes=(-3, -2, -1), workers=_FFT_WORKERS)


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorusGrid:
    n: int
    length: float = 2.0 * math.pi

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise GridError("n >= 8 and even", f"n={self.n}")
        if not (self.length > 0 and math.isfinite(self.length)):
            raise GridError("L > 0", f"L={self.length}")

    @property
    def k0(self) -> float:
        """Smallest nonzero wavenumber ``2*pi/L``."""
        return 2.0 * math.pi / self.length

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n // 2 + 1)

    @property
    def k_max(self) -> float:
        """Largest wavenumber along an axis, ``pi*n/L``."""
        return math.pi * self.n / self.length

    @cached_property
    def integer_modes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        full = sfft.fftfreq(self.n, 1.0 / self.n)
        half = sfft.rfftfreq(self.n, 1.0 / self.n)
        return full[:, None, None], full[None, :, None], half[None, None, :]

    @cached_property
    def wavevector(self) -> np.ndarray:
        kx, ky, kz = self.integer_modes
        k = np.empty((3,) + self.spectral_shape)
        k[0], k[1], k[2] = np.broadcast_arrays(kx * self.k0, ky * self.k0, kz * self.k0)
        return k

    @cached_property
    def wavenumber(self) -> np.ndarray:
        return np.sqrt(np.sum(self.wavevector**2, axis=0))

    @cached_property
    def band_range(self) -> tuple[int, int]:
        j_min = math.ceil(math.log2(self.k0) - BAND_EDGE_TOL) + 1
        j_max = math.floor(math.log2(self.k_max) + BAND_EDGE_TOL) - 1
        return j_min, j_max

    @property
    def bands(self) -> range:
        j_min, j_max = self.band_range
        return range(j_min, j_max + 1)

    @property
    def covered_shell(self) -> tuple[float, float]:
        """Wavenumbers on which the resolvable blocks sum to one."""
        j_min, j_max = self.band_range
        return 2.0**j_min, 2.0**j_max

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.arange(self.n) * (self.length / self.n)
        return np.meshgrid(x, x, x, indexing="ij")


def _pad_indices(n: int, m: int):
    h = n // 2
    axis = np.r_[0:h, m - h : m]
    return np.ix_(axis, axis, np.arange(h + 1))


def pad_coeffs(coeffs: np.ndarray, n: int, m: int) -> np.ndarray:
    """Embed coefficients of an ``n`` grid into an ``m`` grid (``m >= n``)."""
    out = np.zeros(coeffs.shape[:-3] + (m, m, m // 2 + 1), dtype=complex)
    out[(Ellipsis,) + _pad_indices(n, m)] = coeffs
    return out


def truncate_coeffs(coeffs: np.ndarray, n: int, m: int) -> np.ndarray:
    """Inverse of :func:`pad_coeffs`: keep the modes an ``n`` grid can hold."""
    return np.array(coeffs[(Ellipsis,) + _pad_indices(n, m)])


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Fourier coefficients of a scalar (1), vector (3) or joint (4) field."""

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.ndim == 3:
            coeffs = coeffs[None]
        if coeffs.ndim != 4 or coeffs.shape[1:] != self.grid.spectral_shape:
            raise GridError(
                "coefficients match the grid",
                f"shape={coeffs.shape} expected=(c,)+{self.grid.spectral_shape}",
            )
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def from_physical(cls, grid: TorusGrid, values: np.ndarray) -> "SpectralField":
        values = np.asarray(values, dtype=float)
        if values.ndim == 3:
            values = values[None]
        return cls(grid, forward(values))

    @classmethod
    def zeros(cls, grid: TorusGrid, components: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((components,) + grid.spectral_shape, dtype=complex))

    @property
    def components(self) -> int:
        return self.coeffs.shape[0]

    def component(self, index) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs[index])

    def physical(self, *, oversample: bool = False) -> np.ndarray:
        n = self.grid.n
        if not oversample:
            return inverse(self.coeffs, n)
        return inverse(pad_coeffs(self.coeffs, n, 2 * n), 2 * n)

    @property
    def mean(self) -> np.ndarray:
        return self.coeffs[:, 0, 0, 0].real.copy()

    def mean_free(self) -> "SpectralField":
        coeffs = self.coeffs.copy()
        coeffs[:, 0, 0, 0] = 0.0
        return SpectralField(self.grid, coeffs)

    def scaled(self, factor: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * factor)

    def plus(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def masked(self, mask: np.ndarray) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * mask)

    def gradient(self) -> "SpectralField":
        if self.components != 1:
            raise ConstraintError("gradient of a scalar field", f"components={self.components}")
        return SpectralField(self.grid, 1j * self.grid.wavevector * self.coeffs[0])

    def divergence(self) -> "SpectralField":
        if self.components != 3:
            raise ConstraintError("divergence of a vector field", f"components={self.components}")
        return SpectralField(self.grid, np.sum(1j * self.grid.wavevector * self.coeffs, axis=0))

    def realified(self) -> "SpectralField":
        """Project onto real-valued fields (restores Hermitian symmetry)."""
        return SpectralField.from_physical(self.grid, self.physical())

    def hermitian_defect(self) -> float:
        scale = float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0
        if scale == 0.0:
            return 0.0
        return float(np.max(np.abs(self.coeffs - self.realified().coeffs))) / scale

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))


def _check_same_grid(*fields: SpectralField) -> None:
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise GridError("fields share one grid", f"{grid} vs {other.grid}")


def stack_fields(*fields: SpectralField) -> SpectralField:
    """Join fields component-wise, e.g. ``(a, u)`` into one 4-component field."""
    _check_same_grid(*fields)
    return SpectralField(fields[0].grid, np.concatenate([f.coeffs for f in fields], axis=0))


def exact_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """Alias-free product of two fields, truncated back to the grid.

    Components broadcast, so a scalar times a vector gives a vector.
    """
    _check_same_grid(f, g)
    n = f.grid.n
    m = 2 * n
    fp = inverse(pad_coeffs(f.coeffs, n, m), m)
    gp = inverse(pad_coeffs(g.coeffs, n, m), m)
    return SpectralField(f.grid, truncate_coeffs(forward(fp * gp), n, m))


def lp_norm(values: np.ndarray, p: float) -> float:
    """Normalized-measure L^p norm of the pointwise Euclidean magnitude."""
    if values.shape[0] == 1:
        magnitude = np.abs(values[0])
    else:
        magnitude = np.sqrt(np.sum(values * values, axis=0))
    if math.isinf(p):
        return float(magnitude.max())
    if p == 2:
        return float(math.sqrt(np.mean(magnitude * magnitude)))
    return float(np.mean(magnitude**p) ** (1.0 / p))


# ---------------------------------------------------------------------------
# dyadic partition
# ---------------------------------------------------------------------------


def smooth_bump(r: np.ndarray) -> np.ndarray:
    """C-infinity bump in ``log2 |xi|``, supported on ``1/2 <= |xi| <= 2``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    positive = r > 0
    x = np.zeros_like(r)
    x[positive] = np.log2(r[positive])
    inside = positive & (np.abs(x) < 1.0)
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


def normalized_profile(r: np.ndarray, chi: Callable[[np.ndarray], np.ndarray] = smooth_bump) -> np.ndarray:
    """phi_0 = chi / sum_k chi(2^-k .), which sums to one over all dyadic dilations."""
    r = np.asarray(r, dtype=float)
    numerator = chi(r)
    denominator = sum(chi(r * 2.0 ** (-k)) for k in range(-2, 3))
    out = np.zeros_like(r)
    nonzero = denominator > 0
    out[nonzero] = numerator[nonzero] / denominator[nonzero]
    return out


@dataclass(frozen=True, eq=False)
class DyadicPartition:
    grid: TorusGrid
    band_range: tuple[int, int]
    chi: Callable[[np.ndarray], np.ndarray] = smooth_bump

    @property
    def bands(self) -> range:
        return range(self.band_range[0], self.band_range[1] + 1)

    @property
    def band_array(self) -> np.ndarray:
        return np.arange(self.band_range[0], self.band_range[1] + 1)

    def phi(self, j: int, xi_norm: np.ndarray) -> np.ndarray:
        return normalized_profile(np.asarray(xi_norm, dtype=float) * 2.0 ** (-j), self.chi)

    @cached_property
    def _multipliers(self) -> dict[int, np.ndarray]:
        return {j: self.phi(j, self.grid.wavenumber) for j in self.bands}

    def multiplier(self, j: int) -> np.ndarray:
        if j not in self._multipliers:
            raise GridError(
                "band inside the resolvable range",
                f"j={j} range={list(self.band_range)}",
            )
        return self._multipliers[j]

    def covered_mask(self) -> np.ndarray:
        low, high = self.grid.covered_shell
        k = self.grid.wavenumber
        return (k >= low * (1 - BAND_EDGE_TOL)) & (k <= high * (1 + BAND_EDGE_TOL))

    def unity_defect(self) -> float:
        """Largest deviation of sum_j phi_j from one over the covered shell."""
        total = sum(self._multipliers.values())
        mask = self.covered_mask()
        if not mask.any():
            return 0.0
        return float(np.max(np.abs(total[mask] - 1.0)))


def make_partition(grid: TorusGrid, chi: Callable[[np.ndarray], np.ndarray] = smooth_bump) -> DyadicPartition:
    j_min, j_max = grid.band_range
    if j_max - j_min + 1 < 3:
        raise GridError(
            "grid hosts at least 3 dyadic bands",
            f"n={grid.n} L={grid.length:.6g} bands={list(range(j_min, j_max + 1))}",
        )
    return DyadicPartition(grid=grid, band_range=(j_min, j_max), chi=chi)


def project_band(f: SpectralField, j: int, part: DyadicPartition) -> SpectralField:
    return f.masked(part.multiplier(j))


def reconstruct(f: SpectralField, part: DyadicPartition) -> SpectralField:
    """Sum of all resolvable blocks of ``f``."""
    total = sum(part.multiplier(j) for j in part.bands)
    return f.masked(total)


# ---------------------------------------------------------------------------
# Besov norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Truncation:
    """Frequency selection ``alpha < 2^j <= beta`` (``low`` keeps ``2^j <= beta``)."""

    kind: str = "full"
    alpha: float = 0.0
    beta: float = math.inf

    def __post_init__(self):
        if self.kind not in ("full", "low", "mid", "high"):
            raise ConstraintError("truncation kind in full|low|mid|high", self.kind)
        if self.alpha < 0 or self.beta < 0:
            raise ConstraintError("0 <= alpha and 0 <= beta", f"alpha={self.alpha} beta={self.beta}")
        if self.kind == "mid" and not self.alpha < self.beta:
            raise ConstraintError("alpha < beta", f"alpha={self.alpha} beta={self.beta}")

    @classmethod
    def full(cls) -> "Truncation":
        return cls("full")

    @classmethod
    def low(cls, alpha: float) -> "Truncation":
        return cls("low", 0.0, alpha)

    @classmethod
    def mid(cls, alpha: float, beta: float) -> "Truncation":
        return cls("mid", alpha, beta)

    @classmethod
    def high(cls, beta: float) -> "Truncation":
        return cls("high", beta, math.inf)

    def mask(self, bands: np.ndarray) -> np.ndarray:
        scale = 2.0 ** np.asarray(bands, dtype=float)
        if self.kind == "full":
            return np.ones(scale.shape, dtype=bool)
        if self.kind == "low":
            return scale <= self.beta
        return (scale > self.alpha) & (scale <= self.beta)

    def label(self) -> str:
        if self.kind == "full":
            return "full"
        if self.kind == "low":
            return f"l;{self.beta:.6g}"
        if self.kind == "high":
            return f"h;{self.alpha:.6g}"
        return f"m;{self.alpha:.6g},{self.beta:.6g}"


FULL = Truncation.full()


@dataclass(frozen=True)
class BesovSpec:
    s: float
    p: float = 2.0
    sigma: float = 1.0
    truncation: Truncation = FULL

    def __post_init__(self):
        if not self.p >= 1:
            raise ConstraintError("p >= 1", f"p={self.p}")
        if not self.sigma >= 1:
            raise ConstraintError("sigma >= 1", f"sigma={self.sigma}")

    def restricted(self, truncation: Truncation) -> "BesovSpec":
        return replace(self, truncation=truncation)


def band_norms(f: SpectralField, p: float, part: DyadicPartition, *, oversample: bool = False) -> np.ndarray:
    """``||Delta_j f||_{L^p}`` for every resolvable band, in band order."""
    return band_norm_table(f, (p,), part, oversample=oversample)[p]


def band_norm_table(
    f: SpectralField,
    exponents: Iterable[float],
    part: DyadicPartition,
    *,
    oversample: bool = False,
) -> dict[float, np.ndarray]:
    if part.grid != f.grid:
        raise GridError("field and partition share one grid")
    if not f.is_finite():
        raise ConstraintError("finite coefficients")
    exponents = tuple(dict.fromkeys(exponents))
    table = {p: np.zeros(len(part.bands)) for p in exponents}
    for index, j in enumerate(part.bands):
        block = f.coeffs * part.multiplier(j)
        if not np.any(block):
            continue
        values = project_physical(block, f.grid, oversample)
        for p in exponents:
            table[p][index] = lp_norm(values, p)
    return table


def project_physical(coeffs: np.ndarray, grid: TorusGrid, oversample: bool) -> np.ndarray:
    if oversample:
        return inverse(pad_coeffs(coeffs, grid.n, 2 * grid.n), 2 * grid.n)
    return inverse(coeffs, grid.n)


def aggregate(weighted: np.ndarray, spec: BesovSpec, part: DyadicPartition) -> float:
    """l^sigma sum of ``2^{sj} x_j`` over the bands ``spec.truncation`` keeps."""
    bands = part.band_array
    selected = spec.truncation.mask(bands)
    values = (2.0 ** (spec.s * bands) * np.asarray(weighted, dtype=float))[selected]
    if values.size == 0:
        return 0.0
    if math.isinf(spec.sigma):
        return float(values.max())
    if spec.sigma == 1:
        return float(values.sum())
    return float(np.sum(values**spec.sigma) ** (1.0 / spec.sigma))


def besov_norm(f: SpectralField, spec: BesovSpec, part: DyadicPartition, *, oversample: bool = False) -> float:
    return aggregate(band_norms(f, spec.p, part, oversample=oversample), spec, part)


def bernstein_check(f: SpectralField, part: DyadicPartition, p: float, *, oversample: bool = True) -> list[dict]:
    """Compare ``||grad Delta_j f||_p`` with ``2^{j+1} ||Delta_j f||_p`` per band."""
    rows = []
    for j in part.bands:
        block = project_band(f, j, part)
        if not np.any(block.coeffs):
            continue
        lhs = lp_norm(block.gradient().physical(oversample=oversample), p)
        rhs = 2.0 ** (j + 1) * lp_norm(block.physical(oversample=oversample), p)
        rows.append({"band": j, "p": p, "gradient": lhs, "bound": rhs, "ok": lhs <= rhs * (1 + 1e-12)})
    return rows


# ---------------------------------------------------------------------------
# time series and Chemin-Lerner norms
# ---------------------------------------------------------------------------


def conjugate_exponent(r: float) -> float:
    if math.isinf(r):
        return 1.0
    if r == 1:
        return math.inf
    return r / (r - 1.0)


@dataclass(frozen=True, eq=False)
class TimeSeries:
    times: np.ndarray
    snapshots: tuple[SpectralField, ...]
    r: float = math.inf

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        snapshots = tuple(self.snapshots)
        if times.ndim != 1 or times.size != len(snapshots) or times.size == 0:
            raise ConstraintError("one snapshot per time", f"times={times.size} snapshots={len(snapshots)}")
        if times[0] != 0.0:
            raise ConstraintError("series starts at t = 0", f"t0={times[0]}")
        if np.any(np.diff(times) <= 0):
            raise ConstraintError("times strictly increasing")
        _check_same_grid(*snapshots)
        if not self.r >= 1:
            raise ConstraintError("r >= 1", f"r={self.r}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "snapshots", snapshots)

    @property
    def grid(self) -> TorusGrid:
        return self.snapshots[0].grid

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def r_conjugate(self) -> float:
        return conjugate_exponent(self.r)

    @property
    def r_star(self) -> float:
        """``1/r* = 1/2 - 1/r``."""
        inv = 0.5 - (0.0 if math.isinf(self.r) else 1.0 / self.r)
        return math.inf if inv <= 0 else 1.0 / inv

    def with_exponent(self, r: float) -> "TimeSeries":
        return TimeSeries(self.times, self.snapshots, r)

    def until(self, t: float) -> "TimeSeries":
        count = int(np.searchsorted(self.times, t * (1 + 1e-12), side="right"))
        return TimeSeries(self.times[: max(count, 1)], self.snapshots[: max(count, 1)], self.r)

    def scaled(self, factor: float) -> "TimeSeries":
        return TimeSeries(self.times, tuple(f.scaled(factor) for f in self.snapshots), self.r)

    def map(self, fn: Callable[[SpectralField], SpectralField]) -> "TimeSeries":
        return TimeSeries(self.times, tuple(fn(f) for f in self.snapshots), self.r)

    @classmethod
    def constant(cls, field: SpectralField, times: Sequence[float], r: float = math.inf) -> "TimeSeries":
        times = np.asarray(times, dtype=float)
        return cls(times, tuple(field for _ in times), r)


def time_norm(values: np.ndarray, times: np.ndarray, r: float) -> np.ndarray:
    """L^r in time along axis 0 (trapezoid for finite ``r``, max for ``r = inf``)."""
    values = np.asarray(values, dtype=float)
    if math.isinf(r):
        return values.max(axis=0)
    if values.shape[0] < 2:
        raise ConstraintError("at least 2 snapshots for r < inf", f"snapshots={values.shape[0]}")
    if r == 1:
        return trapezoid(values, times, axis=0)
    return trapezoid(values**r, times, axis=0) ** (1.0 / r)


def series_band_table(
    series: TimeSeries,
    exponents: Iterable[float],
    part: DyadicPartition,
    *,
    oversample: bool = False,
) -> dict[float, np.ndarray]:
    """Per-snapshot band norms, shape ``(len(times), len(bands))`` per exponent."""
    exponents = tuple(dict.fromkeys(exponents))
    rows = [band_norm_table(f, exponents, part, oversample=oversample) for f in series.snapshots]
    return {p: np.stack([row[p] for row in rows]) for p in exponents}


def chemin_lerner_from_table(table: np.ndarray, times: np.ndarray, r: float, spec: BesovSpec, part: DyadicPartition) -> float:
    return aggregate(time_norm(table, times, r), spec, part)


def lebesgue_from_table(table: np.ndarray, times: np.ndarray, r: float, spec: BesovSpec, part: DyadicPartition) -> float:
    per_time = np.array([aggregate(row, spec, part) for row in table])
    return float(time_norm(per_time, times, r))


def chemin_lerner_norm(series: TimeSeries, spec: BesovSpec, part: DyadicPartition, *, r: float | None = None) -> float:
    """``|| 2^{sj} ||Delta_j F||_{L^r(I;L^p)} ||_{l^sigma}``."""
    r = series.r if r is None else r
    table = series_band_table(series, (spec.p,), part)[spec.p]
    return chemin_lerner_from_table(table, series.times, r, spec, part)


def lebesgue_besov_norm(series: TimeSeries, spec: BesovSpec, part: DyadicPartition, *, r: float | None = None) -> float:
    """``|| ||F(t)||_{B^s_{p,sigma}} ||_{L^r(I)}`` (Besov first, then time)."""
    r = series.r if r is None else r
    table = series_band_table(series, (spec.p,), part)[spec.p]
    return lebesgue_from_table(table, series.times, r, spec, part)


# ---------------------------------------------------------------------------
# paraproducts and empirical product / composition constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BonyParts:
    paraproduct_fg: SpectralField
    remainder: SpectralField
    paraproduct_gf: SpectralField

    def total(self) -> SpectralField:
        return self.paraproduct_fg.plus(self.remainder).plus(self.paraproduct_gf)


def bony_decompose(f: SpectralField, g: SpectralField, part: DyadicPartition) -> BonyParts:
    """Split ``f*g`` (mean-free parts) into ``T_f g + R(f, g) + T_g f``.

    Block pairs ``(k, j)`` with ``k <= j - 3`` feed ``T_f g``, ``|k - j| <= 2``
    feed the remainder; products are formed on a 2x grid so the three parts
    add up to the alias-free product of the reconstructed factors.
    """
    _check_same_grid(f, g)
    if f.components != 1 or g.components != 1:
        raise ConstraintError("scalar factors", f"components=({f.components}, {g.components})")
    grid = f.grid
    n, m = grid.n, 2 * grid.n
    f0, g0 = f.mean_free(), g.mean_free()
    bands = list(part.bands)
    fb = [inverse(pad_coeffs(f0.coeffs * part.multiplier(j), n, m), m)[0] for j in bands]
    gb = [inverse(pad_coeffs(g0.coeffs * part.multiplier(j), n, m), m)[0] for j in bands]
    zero = np.zeros((m, m, m))

    t_fg = zero.copy()
    t_gf = zero.copy()
    rem = zero.copy()
    for jj, j in enumerate(bands):
        low_f = sum((fb[kk] for kk, k in enumerate(bands) if k <= j - 3), zero)
        low_g = sum((gb[kk] for kk, k in enumerate(bands) if k <= j - 3), zero)
        near_g = sum((gb[kk] for kk, k in enumerate(bands) if abs(k - j) <= 2), zero)
        t_fg += low_f * gb[jj]
        t_gf += low_g * fb[jj]
        rem += fb[jj] * near_g

    def back(values):
        return SpectralField(grid, truncate_coeffs(forward(values[None]), n, m))

    return BonyParts(back(t_fg), back(rem), back(t_gf))


def random_band_field(
    grid: TorusGrid,
    part: DyadicPartition,
    rng: np.random.Generator,
    bands: Sequence[int] | None = None,
    *,
    components: int = 1,
) -> SpectralField:
    """Random-phase real field with a smooth fixed envelope over ``bands``, unit L^2 norm."""
    bands = list(part.bands)[:-1] if bands is None else list(bands)
    envelope = sum(part.multiplier(j) for j in bands)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(components,) + grid.spectral_shape)
    coeffs = envelope * np.exp(1j * phases)
    coeffs[:, 0, 0, 0] = 0.0
    field = SpectralField(grid, coeffs).realified()
    norm = lp_norm(field.physical(), 2)
    if norm == 0.0:
        raise GridError("bands carry at least one grid mode", f"bands={bands}")
    return field.scaled(1.0 / norm)


@dataclass
class HarnessReport:
    lemma: str
    samples: int
    skipped: int
    max_ratio: float
    ratios: np.ndarray
    scaling_drift: float
    parameters: dict

    def as_dict(self) -> dict:
        return {
            "lemma": self.lemma,
            "samples": self.samples,
            "skipped": self.skipped,
            "max_ratio": self.max_ratio,
            "scaling_drift": self.scaling_drift,
            "parameters": self.parameters,
        }


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def product_constraints(lemma: str, exponents: dict) -> list[str]:
    """Hypotheses of the product estimates that ``exponents`` violate."""
    failed = []
    if lemma == "A1":
        p1, p2 = exponents["p1"], exponents["p2"]
        s1, s2 = exponents["s1"], exponents["s2"]
        if not (p1 >= 1 and p2 >= 1):
            failed.append("1 <= p1, p2")
        if not s1 + s2 >= max(0.0, 3.0 * (1.0 / p1 + 1.0 / p2 - 1.0)) - 1e-14:
            failed.append("s1 + s2 >= max(0, 3(1/p1 + 1/p2 - 1))")
        if not s1 <= 3.0 / p1 + 1e-14:
            failed.append("s1 <= 3/p1")
        if not s2 < min(3.0 / p1, 3.0 / p2):
            failed.append("s2 < min(3/p1, 3/p2)")
    elif lemma == "A2":
        q = exponents["q"]
        s1, s2, s3, s4 = (exponents[k] for k in ("s1", "s2", "s3", "s4"))
        cap = 3.0 * (2.0 / q - 0.5)
        if not 2 <= q <= 4:
            failed.append("2 <= q <= 4")
        if not abs((s1 + s2) - (s3 + s4)) <= 1e-14:
            failed.append("s1 + s2 = s3 + s4")
        if not s1 + s2 > 0:
            failed.append("s = s1 + s2 > 0")
        if not (s1 <= cap + 1e-14 and s4 <= cap + 1e-14):
            failed.append("s1, s4 <= 3(2/q - 1/2)")
    else:
        failed.append("lemma in A1|A2")
    return failed


def _product_sides(lemma: str, f: SpectralField, g: SpectralField, ex: dict, part: DyadicPartition) -> tuple[float, float]:
    fg = exact_product(f, g)
    if lemma == "A1":
        lhs = besov_norm(fg, BesovSpec(ex["s1"] + ex["s2"] - 3.0 / ex["p1"], ex["p2"], math.inf), part)
        rhs = besov_norm(f, BesovSpec(ex["s1"], ex["p1"], 1.0), part) * besov_norm(
            g, BesovSpec(ex["s2"], ex["p2"], math.inf), part
        )
        return lhs, rhs
    q, sigma, beta = ex["q"], ex.get("sigma", 1.0), ex.get("beta", math.inf)
    s = ex["s1"] + ex["s2"]
    low = Truncation.low(beta)
    low4 = Truncation.low(4.0 * beta)
    lhs = besov_norm(fg, BesovSpec(s - 3.0 * (2.0 / q - 0.5), 2.0, sigma, low), part)
    rhs = besov_norm(f, BesovSpec(ex["s1"], q, 1.0, low), part) * besov_norm(
        g, BesovSpec(ex["s2"], q, sigma, low4), part
    ) + besov_norm(f, BesovSpec(ex["s3"], q, sigma), part) * besov_norm(g, BesovSpec(ex["s4"], q, 1.0), part)
    return lhs, rhs


def product_estimate_harness(
    lemma: str,
    exponents: dict,
    part: DyadicPartition,
    *,
    samples: int = 64,
    seed: int = 0,
    bands: Sequence[int] | None = None,
    scale: float = 7.5,
) -> HarnessReport:
    """Empirical constant of a bilinear product estimate over random fields.

    Each sample draws ``f`` and ``g``; the reported constant is the max of
    LHS/RHS. ``scaling_drift`` is the largest relative change of a ratio when
    ``f`` is multiplied by ``scale``.
    """
    failed = product_constraints(lemma, exponents)
    if failed:
        raise ConstraintError(failed[0], f"lemma={lemma} exponents={exponents}")
    rng = np.random.default_rng(seed)
    ratios, skipped, drift = [], 0, 0.0
    for _ in range(samples):
        f = random_band_field(part.grid, part, rng, bands)
        g = random_band_field(part.grid, part, rng, bands)
        lhs, rhs = _product_sides(lemma, f, g, exponents, part)
        if rhs == 0.0:
            skipped += 1
            continue
        ratio = lhs / rhs
        ratios.append(ratio)
        if len(ratios) <= 4:
            lhs_c, rhs_c = _product_sides(lemma, f.scaled(scale), g, exponents, part)
            drift = max(drift, abs(lhs_c / rhs_c - ratio) / max(ratio, 1e-300))
    ratios = np.asarray(ratios)
    report = HarnessReport(
        lemma=lemma,
        samples=len(ratios),
        skipped=skipped,
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        ratios=ratios,
        scaling_drift=drift,
        parameters={k: _finite_or_none(float(v)) for k, v in exponents.items()},
    )
    logger.info(
        "product_harness lemma=%s samples=%s max_ratio=%.6g drift=%.3g",
        lemma,
        report.samples,
        report.max_ratio,
        drift,
    )
    return report


def compose(F: Callable[[np.ndarray], np.ndarray], a: SpectralField) -> SpectralField:
    """Pointwise ``F(a)`` evaluated on the 2x grid, truncated back."""
    n, m = a.grid.n, 2 * a.grid.n
    values = inverse(pad_coeffs(a.coeffs, n, m), m)
    return SpectralField(a.grid, truncate_coeffs(forward(F(values)), n, m))


def composition_estimate_harness(
    F: Callable[[np.ndarray], np.ndarray],
    part: DyadicPartition,
    *,
    s: float = 0.5,
    p: float = 2.0,
    sigma: float = 1.0,
    radius: float = 0.5,
    samples: int = 64,
    seed: int = 0,
    fill: float = 0.9,
    bands: Sequence[int] | None = None,
    fields: Sequence[SpectralField] | None = None,
) -> HarnessReport:
    """Empirical constant ``||F(a)||_{B^s_{p,sigma}} / ||a||_{B^s_{p,sigma}}``.

    Generated samples are scaled to ``||a||_inf = fill * radius``; supplied
    ``fields`` must already satisfy ``||a||_inf <= radius``.
    """
    if not s > 0:
        raise ConstraintError("s > 0", f"s={s}")
    if abs(float(np.asarray(F(np.zeros(1)))[0])) > 1e-14:
        raise ConstraintError("F(0) = 0")
    spec = BesovSpec(s, p, sigma)
    rng = np.random.default_rng(seed)
    if fields is None:
        fields = []
        for _ in range(samples):
            a = random_band_field(part.grid, part, rng, bands)
            peak = float(np.max(np.abs(a.physical(oversample=True))))
            fields.append(a.scaled(fill * radius / peak))
    ratios, skipped = [], 0
    for a in fields:
        peak = float(np.max(np.abs(a.physical(oversample=True))))
        if peak > radius * (1 + 1e-12):
            raise ConstraintError("||a||_inf <= R", f"||a||_inf={peak:.6g} R={radius:.6g}")
        denominator = besov_norm(a, spec, part)
        if denominator == 0.0:
            skipped += 1
            continue
        ratios.append(besov_norm(compose(F, a), spec, part) / denominator)
    ratios = np.asarray(ratios)
    report = HarnessReport(
        lemma="A3",
        samples=len(ratios),
        skipped=skipped,
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        ratios=ratios,
        scaling_drift=0.0,
        parameters={"s": s, "p": _finite_or_none(p), "sigma": _finite_or_none(sigma), "R": radius},
    )
    logger.info("composition_harness samples=%s max_ratio=%.6g", report.samples, report.max_ratio)
    return report
