"""Time integration of the descent-ascent Fokker-Planck pair and its particle system.

PDE:  d_t mu = mu'' + (mu V_nu')',   d_t nu = nu'' - (nu U_mu')'.

The grid scheme is exponential Euler (ETD1) in Fourier space: diffusion is
integrated exactly and the dealiased drift divergence is held constant over
the step. Particles follow the matching Langevin SDEs with Euler-Maruyama
and counter-based Gaussian noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StepUnstable
from .grid import NEGATIVE_TOL, Density, PeriodicGrid, diff_values
from .payoff import Payoff

log = logging.getLogger(__name__)

MASS_DEFECT_TOL = 1e-12
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EvolverConfig:
    dt: float
    t_end: float
    snapshot_stride: int = 100
    cfl_safety: float = 0.5
    max_halvings: int = 20

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must lie in (0, 1]")

    def cfl_limit(self, f: Payoff, grid: PeriodicGrid) -> float:
        """``cfl_safety * h / max(|V'|, |U'|)`` using the payoff's gradient bounds."""
        gx, gy = f.gradient_bounds()
        return self.cfl_safety * grid.spacing / max(gx, gy, 1e-12)


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    mu_snapshots: list = field(default_factory=list)
    nu_snapshots: list = field(default_factory=list)
    mass_defect: list = field(default_factory=list)
    min_density: list = field(default_factory=list)
    dt_used: list = field(default_factory=list)

    def snapshot(self, t, mu, nu):
        self.times.append(float(t))
        self.mu_snapshots.append(mu)
        self.nu_snapshots.append(nu)

    @property
    def max_mass_defect(self) -> float:
        return max(self.mass_defect, default=0.0)

    @property
    def worst_min_density(self) -> float:
        return min(self.min_density, default=0.0)


@dataclass(frozen=True)
class StepInfo:
    mass_defect: float
    min_density: float
    dt_used: float
    substeps: int


# -- grid PDE --------------------------------------------------------------------------


class _Spectral:
    """Fourier multipliers for one grid size, cached per N."""

    _cache: dict = {}

    def __new__(cls, n):
        if n not in cls._cache:
            obj = super().__new__(cls)
            k = np.fft.rfftfreq(n, d=1.0 / n)
            obj.ik = TWO_PI * 1j * k
            obj.a = (TWO_PI * k) ** 2
            # 2/3 rule
            obj.keep = (k <= n // 3).astype(float)
            obj.ik_dealiased = obj.ik * obj.keep
            cls._cache[n] = obj
        return cls._cache[n]

    def etd(self, dt):
        decay = np.exp(-self.a * dt)
        phi1 = np.empty_like(self.a)
        nz = self.a > 0
        phi1[nz] = -np.expm1(-self.a[nz] * dt) / self.a[nz]
        phi1[~nz] = dt
        return decay, phi1


def _raw_step(mu_vals, nu_vals, f: Payoff, dt: float, grid: PeriodicGrid):
    """One ETD1 step on raw arrays; returns unclipped, unnormalized values."""
    sp = _Spectral(grid.n_points)
    x = grid.nodes
    w = grid.spacing
    # potentials from exact payoff moments of the current densities
    yc, ys = _moments_y(f, nu_vals, x, w)
    xc, xs = _moments_x(f, mu_vals, x, w)
    vp = f.potential_x((yc, ys), x, order=1)
    up = f.potential_y((xc, xs), x, order=1)
    decay, phi1 = sp.etd(dt)
    n_mu = sp.ik_dealiased * np.fft.rfft(mu_vals * vp)
    n_nu = -sp.ik_dealiased * np.fft.rfft(nu_vals * up)
    mu_hat = decay * np.fft.rfft(mu_vals) + phi1 * n_mu
    nu_hat = decay * np.fft.rfft(nu_vals) + phi1 * n_nu
    n = grid.n_points
    return np.fft.irfft(mu_hat, n), np.fft.irfft(nu_hat, n)


def _moments_y(f, vals, y, w):
    if not f.terms:
        return np.zeros(0), np.zeros(0)
    l = np.array([t.l for t in f.terms], dtype=float)
    ph = TWO_PI * np.outer(l, y)
    return np.cos(ph) @ (w * vals), np.sin(ph) @ (w * vals)


def _moments_x(f, vals, x, w):
    if not f.terms:
        return np.zeros(0), np.zeros(0)
    k = np.array([t.k for t in f.terms], dtype=float)
    th = np.array([t.theta for t in f.terms], dtype=float)
    ph = TWO_PI * np.outer(k, x) + th[:, None]
    return np.cos(ph) @ (w * vals), np.sin(ph) @ (w * vals)


def _finish(vals, grid):
    """Mass defect, pre-clip minimum, and the clipped renormalized values."""
    mass = grid.spacing * vals.sum()
    lo = float(vals.min())
    out = np.where(vals < 0.0, 0.0, vals)
    out = out / (grid.spacing * out.sum())
    return abs(mass - 1.0), lo, out


def pde_step_info(mu: Density, nu: Density, f: Payoff, dt: float, max_halvings: int = 20):
    """Advance ``(mu, nu)`` by ``dt``; returns ``(mu, nu, StepInfo)``.

    If either density dips below ``-1e-12`` the step is redone as two
    half-steps, recursively, at most ``max_halvings`` times.
    """
    grid = mu.grid
    for halving in range(max_halvings + 1):
        n_sub = 2**halving
        h_dt = dt / n_sub
        m, v = mu.values, nu.values
        defect, lo, ok = 0.0, np.inf, True
        for _ in range(n_sub):
            m_raw, v_raw = _raw_step(m, v, f, h_dt, grid)
            dm, lm, m = _finish(m_raw, grid)
            dv, lv, v = _finish(v_raw, grid)
            defect = max(defect, dm, dv)
            lo = min(lo, lm, lv)
            if min(lm, lv) < -NEGATIVE_TOL:
                ok = False
                break
        if ok:
            if defect > MASS_DEFECT_TOL:
                log.warning("mass defect %.3e exceeds %.0e", defect, MASS_DEFECT_TOL)
            return Density(grid, m), Density(grid, v), StepInfo(defect, lo, h_dt, n_sub)
        log.info("negative density %.3e at dt=%.3e; halving", lo, h_dt)
    raise StepUnstable(f"density stayed negative after {max_halvings} halvings of dt={dt:g}")


def pde_step(mu: Density, nu: Density, f: Payoff, dt: float, max_halvings: int = 20):
    """Advance ``(mu, nu)`` by one exponential-Euler step of size ``dt``."""
    m, v, _ = pde_step_info(mu, nu, f, dt, max_halvings)
    return m, v


def evolve(mu0: Density, nu0: Density, f: Payoff, cfg: EvolverConfig) -> TrajectoryRecord:
    """Integrate to ``cfg.t_end``, snapshotting every ``snapshot_stride`` steps.

    Steps longer than the advective CFL limit are split into equal
    substeps. The last step is shortened so the final snapshot lands on
    ``t_end`` exactly.
    """
    grid = mu0.grid
    limit = cfg.cfl_limit(f, grid)
    n_sub = max(1, math.ceil(cfg.dt / limit - 1e-12))
    if n_sub > 1:
        log.info("dt=%.3e exceeds CFL limit %.3e; using %d substeps", cfg.dt, limit, n_sub)
    n_full = int(math.floor(cfg.t_end / cfg.dt + 1e-9))
    tail = cfg.t_end - n_full * cfg.dt
    if tail < 1e-12 * max(cfg.dt, 1.0):
        tail = 0.0

    rec = TrajectoryRecord()
    mu, nu = mu0, nu0
    rec.snapshot(0.0, mu, nu)

    def advance(mu, nu, step):
        for _ in range(n_sub):
            mu, nu, info = pde_step_info(mu, nu, f, step / n_sub, cfg.max_halvings)
            rec.mass_defect.append(info.mass_defect)
            rec.min_density.append(info.min_density)
            rec.dt_used.append(info.dt_used)
        return mu, nu

    for i in range(1, n_full + 1):
        mu, nu = advance(mu, nu, cfg.dt)
        if i % cfg.snapshot_stride == 0 or (i == n_full and tail == 0.0):
            rec.snapshot(i * cfg.dt if i < n_full or tail else cfg.t_end, mu, nu)
    if tail:
        mu, nu = advance(mu, nu, tail)
        rec.snapshot(cfg.t_end, mu, nu)
    return rec


def drift_residual(f: Payoff, mu: Density, nu: Density) -> tuple[float, float]:
    """Max-norm of the velocity fields ``(log mu + V)'`` and ``(log nu - U)'``.

    Both vanish at the equilibrium; needs strictly positive densities.
    """
    vp = f.V(nu, mu.grid.nodes, order=1)
    up = f.U(mu, nu.grid.nodes, order=1)
    gx = diff_values(np.log(mu.values), 1) + vp
    gy = diff_values(np.log(nu.values), 1) - up
    return float(np.abs(gx).max()), float(np.abs(gy).max())


# -- initial conditions ----------------------------------------------------------------


def initial_pair(init: dict, grid: PeriodicGrid, f: Payoff, eq=None, eigenfunctions=None):
    """Build ``(mu0, nu0)`` from an initialization dict.

    ``{"kind": "uniform"}``; ``{"kind": "gibbs", "potential_terms": [...]}``
    with terms ``{"a", "k", "theta"}`` giving ``exp(-sum a cos(2 pi k x + theta))``
    for both players; ``{"kind": "perturbed_mne", "epsilon": e, "mode": m}``
    giving ``(1 - e) * pi + e * p`` with ``p = pi * (1 + cos(2 pi m x))``, or
    ``p = pi * (1 + phi / max|phi|)`` along the spectral eigenfunctions when
    ``mode == "eigen"``.
    """
    kind = init.get("kind")
    if kind == "uniform":
        u = Density.uniform(grid)
        return u, u
    if kind == "gibbs":
        w = np.zeros(grid.n_points)
        for t in init.get("potential_terms", []):
            w -= t["a"] * np.cos(TWO_PI * t["k"] * grid.nodes + t.get("theta", 0.0))
        rho = Density.from_values(grid, np.exp(w - w.max()))
        return rho, rho
    if kind == "perturbed_mne":
        if eq is None:
            raise ValueError("perturbed_mne needs a certified equilibrium")
        eps = float(init.get("epsilon", 0.01))
        mode = init.get("mode", 1)
        if mode == "eigen":
            if eigenfunctions is None:
                raise ValueError("mode 'eigen' needs the spectral eigenfunctions")
            dirs = eigenfunctions
        else:
            c = np.cos(TWO_PI * int(mode) * grid.nodes)
            dirs = (c, c)
        return (perturb(eq.mu_star, dirs[0], eps), perturb(eq.nu_star, dirs[1], eps))
    raise ValueError(f"unknown initialization kind {kind!r}")


def perturb(pi: Density, direction: np.ndarray, eps: float) -> Density:
    """``pi * (1 + eps * psi / max|psi|)`` with ``psi`` centered under ``pi``."""
    d = np.asarray(direction, dtype=float)
    d = d - pi.grid.quadrature(d * pi.values)
    scale = np.abs(d).max()
    if scale == 0:
        return pi
    return Density.from_values(pi.grid, pi.values * (1.0 + eps * d / scale))


# -- particles -------------------------------------------------------------------------

_INIT_STREAM = np.uint64(2**64 - 1)


@dataclass(frozen=True)
class ParticleEnsemble:
    """Particle positions on ``[0, 1)`` plus unwrapped displacements since ``step = 0``."""

    positions_x: np.ndarray = field(repr=False)
    positions_y: np.ndarray = field(repr=False)
    seed: int = 0
    dt: float = 1e-3
    step: int = 0
    displacement_x: np.ndarray | None = field(default=None, repr=False)
    displacement_y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("positions_x", "positions_y"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or np.any(arr < 0.0) or np.any(arr >= 1.0):
                raise ValueError(f"{name} must be a 1-D array in [0, 1)")
            object.__setattr__(self, name, arr)
        if self.positions_x.shape != self.positions_y.shape:
            raise ValueError("both players need the same particle count")
        for name in ("displacement_x", "displacement_y"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.zeros_like(self.positions_x))

    @property
    def n_particles(self) -> int:
        return self.positions_x.size

    @classmethod
    def at_point(cls, n, x0=0.0, y0=0.0, seed=0, dt=1e-3):
        return cls(np.full(n, float(x0) % 1.0), np.full(n, float(y0) % 1.0), seed=seed, dt=dt)

    @classmethod
    def sample(cls, mu: Density, nu: Density, n: int, seed: int = 0, dt: float = 1e-3):
        """Draw ``n`` particles per player by inverting the piecewise-linear CDFs."""
        words = philox_words(seed, _INIT_STREAM, 0, n)
        u = _unit_uniform(words[:, :2])
        return cls(_inverse_cdf(mu, u[:, 0]), _inverse_cdf(nu, u[:, 1]), seed=seed, dt=dt)


def philox_words(seed: int, stream, start: int, count: int) -> np.ndarray:
    """Raw 64-bit words ``(count, 4)``: block ``i`` belongs to particle ``start + i``.

    The Philox key is ``(seed, stream)``, so each step draws from its own
    stream and any chunking of the particle range reproduces the same words.
    """
    bg = np.random.Philox(key=np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64))
    if start:
        bg.advance(start)
    return bg.random_raw(4 * count).reshape(count, 4)


def _unit_uniform(words):
    # 53 high bits, offset to the open interval (0, 1)
    return ((words >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def gaussian_pairs(seed: int, step: int, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent standard normals per particle via Box-Muller."""
    u = _unit_uniform(philox_words(seed, step, start, count)[:, :2])
    r = np.sqrt(-2.0 * np.log(u[:, 0]))
    ang = TWO_PI * u[:, 1]
    return r * np.cos(ang), r * np.sin(ang)


def _inverse_cdf(rho: Density, u: np.ndarray) -> np.ndarray:
    edges = np.append(rho.grid.nodes, 1.0)
    vals = np.append(rho.values, rho.values[0])
    cells = 0.5 * rho.grid.spacing * (vals[:-1] + vals[1:])
    cdf = np.concatenate([[0.0], np.cumsum(cells)])
    cdf /= cdf[-1]
    return _wrap(np.interp(u, cdf, edges))


def deposit(positions: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Cloud-in-cell histogram density (unit mass) of particles on the grid."""
    n = grid.n_points
    s = positions * n
    j = np.floor(s).astype(np.int64)
    frac = s - j
    j %= n
    out = np.bincount(j, weights=1.0 - frac, minlength=n)
    out += np.bincount((j + 1) % n, weights=frac, minlength=n)
    return out * (n / positions.size)


def _cic_moments(positions, freqs, grid, deconvolve):
    """Cosine/sine moments of the deposited density, optionally CIC-deconvolved."""
    rho = deposit(positions, grid)
    x = grid.nodes
    w = grid.spacing * rho
    ph = TWO_PI * np.outer(freqs, x)
    c, s = np.cos(ph) @ w, np.sin(ph) @ w
    if deconvolve:
        corr = np.sinc(np.asarray(freqs, dtype=float) / grid.n_points) ** 2
        c, s = c / corr, s / corr
    return c, s


def _particle_moments(positions, freqs):
    ph = TWO_PI * np.outer(freqs, positions)
    return np.cos(ph).mean(axis=1), np.sin(ph).mean(axis=1)


def _gather(values, positions, order):
    """Periodic linear (order 1) or four-point Lagrange cubic (order 3) interpolation."""
    n = values.size
    s = positions * n
    j = np.floor(s).astype(np.int64)
    t = s - j
    if order == 1:
        return (1.0 - t) * values[j % n] + t * values[(j + 1) % n]
    wm = -t * (t - 1.0) * (t - 2.0) / 6.0
    w0 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w1 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w2 = (t + 1.0) * t * (t - 1.0) / 6.0
    return wm * values[(j - 1) % n] + w0 * values[j % n] + w1 * values[(j + 1) % n] + w2 * values[(j + 2) % n]


def particle_drift(ens: ParticleEnsemble, f: Payoff, grid: PeriodicGrid, method: str = "deposit",
                   interpolation: str = "linear", deconvolve: bool = False):
    """Drifts ``b = -V'(X)`` and ``c = +U'(Y)`` at the particle positions.

    ``method="deposit"`` deposits both ensembles on the grid, builds the
    gradient fields there and gathers them back; ``method="moments"`` uses
    exact per-term particle sums and serves as the oracle.
    """
    if not f.terms:
        z = np.zeros(ens.n_particles)
        return z, z.copy()
    a, k, l, th = f._arrays
    if method == "moments":
        yc, ys = _particle_moments(ens.positions_y, l)
        xc0, xs0 = _particle_moments(ens.positions_x, k)
        # shift x moments by the per-term phase theta
        xc = xc0 * np.cos(th) - xs0 * np.sin(th)
        xs = xs0 * np.cos(th) + xc0 * np.sin(th)
        return (-f.potential_x((yc, ys), ens.positions_x, order=1),
                f.potential_y((xc, xs), ens.positions_y, order=1))
    if method != "deposit":
        raise ValueError(f"unknown drift method {method!r}")
    order = {"linear": 1, "cubic": 3}[interpolation]
    yc, ys = _cic_moments(ens.positions_y, l, grid, deconvolve)
    xc0, xs0 = _cic_moments(ens.positions_x, k, grid, deconvolve)
    xc = xc0 * np.cos(th) - xs0 * np.sin(th)
    xs = xs0 * np.cos(th) + xc0 * np.sin(th)
    vp = f.potential_x((yc, ys), grid.nodes, order=1)
    up = f.potential_y((xc, xs), grid.nodes, order=1)
    return -_gather(vp, ens.positions_x, order), _gather(up, ens.positions_y, order)


def particle_step(ens: ParticleEnsemble, f: Payoff, grid: PeriodicGrid, noise: bool = True,
                  drift: str = "deposit", interpolation: str = "linear",
                  deconvolve: bool = False) -> ParticleEnsemble:
    """One Euler-Maruyama step ``X += b dt + sqrt(2 dt) xi`` (mod 1), same for Y."""
    b, c = particle_drift(ens, f, grid, drift, interpolation, deconvolve)
    dx = b * ens.dt
    dy = c * ens.dt
    if noise:
        zx, zy = gaussian_pairs(ens.seed, ens.step, 0, ens.n_particles)
        amp = math.sqrt(2.0 * ens.dt)
        dx = dx + amp * zx
        dy = dy + amp * zy
    return replace(
        ens,
        positions_x=_wrap(ens.positions_x + dx),
        positions_y=_wrap(ens.positions_y + dy),
        step=ens.step + 1,
        displacement_x=ens.displacement_x + dx,
        displacement_y=ens.displacement_y + dy,
    )


def _wrap(x):
    x = np.mod(x, 1.0)
    # mod can round up to exactly 1.0 for tiny negatives
    x[x >= 1.0] = 0.0
    return x


def run_particles(ens: ParticleEnsemble, f: Payoff, grid: PeriodicGrid, t_end: float,
                  **step_kw) -> ParticleEnsemble:
    n_steps = int(round(t_end / ens.dt))
    for _ in range(n_steps):
        ens = particle_step(ens, f, grid, **step_kw)
    return ens


def histogram_density(positions: np.ndarray, grid: PeriodicGrid) -> Density:
    """Nearest-bin histogram (bins centered on the nodes) as a grid density."""
    n = grid.n_points
    j = np.floor(positions * n + 0.5).astype(np.int64) % n
    counts = np.bincount(j, minlength=n).astype(float)
    return Density.from_values(grid, counts)
