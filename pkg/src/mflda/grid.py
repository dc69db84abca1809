"""Uniform periodic grid on the unit circle, densities, and spectral calculus.

Everything downstream works on the flat 1-torus ``[0, 1)`` sampled at
``x_j = j / N``. Integrals use the rectangle rule, which is spectrally
accurate for smooth periodic data; derivatives use Fourier multipliers.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import JacobianDegenerate, NegativeDensity

NEGATIVE_TOL = 1e-12
MASS_TOL = 1e-12


@dataclass(frozen=True)
class PeriodicGrid:
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 8:
            raise ValueError(f"grid needs an integer N >= 8, got {self.n_points}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_points

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.arange(self.n_points) / self.n_points
        x.flags.writeable = False
        return x

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        k = np.fft.fftfreq(self.n_points, d=1.0 / self.n_points)
        k.flags.writeable = False
        return k

    def quadrature(self, values) -> float:
        return float(self.spacing * np.sum(values))

    def restrict(self, factor: int) -> "PeriodicGrid":
        if self.n_points % factor:
            raise ValueError("restriction factor must divide N")
        return PeriodicGrid(self.n_points // factor)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridFunction:
    """Real values sampled on a periodic grid (potentials, test functions)."""

    grid: PeriodicGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function has non-finite values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, grid, fn):
        return cls(grid, fn(grid.nodes))

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


@dataclass(frozen=True)
class Density:
    """Probability density on the grid: nonnegative with ``h * sum = 1``.

    Construct through :meth:`from_values` to apply the clipping policy;
    the raw constructor only validates.
    """

    grid: PeriodicGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("density has non-finite values")
        if vals.min() < 0.0:
            raise NegativeDensity(f"min density {vals.min():.3e} < 0")
        mass = self.grid.spacing * vals.sum()
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density mass {mass!r} differs from 1")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_values(cls, grid, values, *, normalize=True) -> "Density":
        """Clip values in ``[-1e-12, 0)`` to zero and renormalize.

        Anything more negative raises :class:`NegativeDensity`.
        """
        vals = np.array(values, dtype=float)
        lo = vals.min()
        if lo < -NEGATIVE_TOL:
            raise NegativeDensity(f"min density {lo:.3e} below -{NEGATIVE_TOL:g}")
        vals[vals < 0.0] = 0.0
        if normalize:
            mass = grid.spacing * vals.sum()
            if not mass > 0:
                raise ValueError("cannot normalize a zero density")
            vals /= mass
        return cls(grid, vals)

    @classmethod
    def uniform(cls, grid) -> "Density":
        return cls(grid, np.ones(grid.n_points))

    @property
    def mass(self) -> float:
        return self.grid.quadrature(self.values)


def quadrature(g) -> float:
    """Rectangle rule ``h * sum(g_j)`` for a Density or GridFunction."""
    return g.grid.quadrature(g.values)


def _spectral_diff(values: np.ndarray, order: int) -> np.ndarray:
    n = values.shape[-1]
    k = np.fft.fftfreq(n, d=1.0 / n)
    mult = (2j * np.pi * k) ** order
    if order % 2 == 1:
        mult[n // 2] = 0.0
    return np.fft.ifft(mult * np.fft.fft(values, axis=-1), axis=-1).real


def _fd_diff(values: np.ndarray, h: float, order: int) -> np.ndarray:
    up = np.roll(values, -1, axis=-1)
    down = np.roll(values, 1, axis=-1)
    if order == 1:
        return (up - down) / (2.0 * h)
    return (up - 2.0 * values + down) / h**2


def diff_values(values, order: int = 1, method: str = "spectral") -> np.ndarray:
    """Periodic derivative of raw sample values on the unit circle."""
    values = np.asarray(values, dtype=float)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot differentiate non-finite values")
    n = values.shape[-1]
    if method == "spectral":
        if n % 2:
            raise ValueError("spectral differentiation needs an even N")
        return _spectral_diff(values, order)
    if method == "fd":
        return _fd_diff(values, 1.0 / n, order)
    raise ValueError(f"unknown differentiation method {method!r}")


def spectral_derivative(g, order: int = 1, method: str = "spectral") -> GridFunction:
    """Fourier-multiplier derivative; ``method="fd"`` gives central differences."""
    return GridFunction(g.grid, diff_values(g.values, order, method))


def fourier_interpolate(values, factor: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples onto a ``factor``-times finer grid.

    The Nyquist coefficient is split evenly between ``+-N/2`` so real,
    even-length input stays real and the coarse samples are reproduced.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    if factor == 1:
        return values.copy()
    c = np.fft.rfft(values)
    big = np.zeros(n * factor // 2 + 1, dtype=complex)
    big[: n // 2] = c[: n // 2]
    big[n // 2] = 0.5 * c[n // 2]
    return np.fft.irfft(big, n * factor) * factor


def cumulative(rho: np.ndarray) -> np.ndarray:
    """Spectral antiderivative ``F(x_j) = int_0^{x_j} rho`` of a unit-mass density."""
    n = rho.shape[-1]
    k = np.fft.fftfreq(n, d=1.0 / n)
    coef = np.fft.fft(rho) / n
    mean = coef[0].real
    anti = np.zeros_like(coef)
    nz = (k != 0) & (np.abs(k) < n // 2)
    anti[nz] = coef[nz] / (2j * np.pi * k[nz])
    x = np.arange(n) / n
    periodic = np.fft.ifft(anti * n).real
    return mean * x + periodic - periodic[0]


def _fritsch_carlson(x, y, slopes):
    """Limit Hermite slopes so the cubic interpolant stays monotone."""
    secant = np.diff(y) / np.diff(x)
    m = slopes.copy()
    flat = secant <= 0.0
    m[:-1][flat] = 0.0
    m[1:][flat] = 0.0
    ok = ~flat
    alpha = np.zeros_like(secant)
    beta = np.zeros_like(secant)
    alpha[ok] = m[:-1][ok] / secant[ok]
    beta[ok] = m[1:][ok] / secant[ok]
    r = np.hypot(alpha, beta)
    big = ok & (r > 3.0)
    if np.any(big):
        tau = 3.0 / r[big]
        idx = np.nonzero(big)[0]
        m[idx] = tau * alpha[big] * secant[big]
        m[idx + 1] = tau * beta[big] * secant[big]
    return m


def pushforward_1d(rho: Density, phi: GridFunction, t: float, eps_jac: float = 1e-6):
    """Density of ``(id + t*phi')_# rho`` resampled on the same grid.

    The transported CDF is known exactly at the displaced nodes, together
    with its slope ``rho / (1 + t*phi'')``; a monotone cubic Hermite
    interpolant through those knots is differentiated at the grid nodes.

    Returns ``(density, factor)`` where ``factor`` is the renormalization
    applied to restore unit mass.
    """
    grid = rho.grid
    if t == 0.0 or not np.any(phi.values - phi.values[0]):
        return rho, 1.0
    d1 = diff_values(phi.values, 1)
    d2 = diff_values(phi.values, 2)
    jac = 1.0 + t * d2
    if jac.min() < eps_jac:
        raise JacobianDegenerate(
            f"1 + t*phi'' reaches {jac.min():.3e} (< {eps_jac:g}); reduce |t|"
        )
    x = grid.nodes
    y = x + t * d1
    cdf = cumulative(rho.values)
    slope = rho.values / jac
    shifts = np.array([-1.0, 0.0, 1.0])
    ys = (y[None, :] + shifts[:, None]).ravel()
    fs = (cdf[None, :] + shifts[:, None]).ravel()
    ms = np.tile(slope, 3)
    ms = _fritsch_carlson(ys, fs, ms)
    spline = CubicHermiteSpline(ys, fs, ms)
    vals = spline(x, 1)
    vals[vals < 0.0] = 0.0
    mass = grid.spacing * vals.sum()
    factor = 1.0 / mass
    if abs(factor - 1.0) > 1e-8:
        warnings.warn(
            f"pushforward renormalization factor {factor!r} is off by more than 1e-8; "
            "the grid under-resolves the transported density",
            RuntimeWarning,
            stacklevel=2,
        )
    return Density(grid, vals * factor), factor


def read_density_csv(path) -> Density:
    xs, vals = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x", "value"]:
            raise ValueError(f"{path}: expected header 'x,value'")
        for row in reader:
            xs.append(float(row["x"]))
            vals.append(float(row["value"]))
    grid = PeriodicGrid(len(vals))
    if abs(xs[0]) > 1e-12 or not np.allclose(np.diff(xs), grid.spacing, atol=1e-12, rtol=0):
        raise ValueError(f"{path}: nodes must start at 0 with uniform spacing 1/N")
    return Density.from_values(grid, vals)


def write_density_csv(path, rho) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for x, v in zip(rho.grid.nodes, rho.values):
            w.writerow([repr(float(x)), repr(float(v))])
