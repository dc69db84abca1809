"""Experiment pipelines, exponential-rate fitting, and run manifests."""

from __future__ import annotations

import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from .dynamics import (EvolverConfig, ParticleEnsemble, evolve, histogram_density, particle_drift,
                       perturb, run_particles)
from .equilibrium import EquilibriumPair, solve_mne_robust
from .errors import InsufficientData, MFLDAError, NonPositiveEnergy
from .geometry import MetricSample, kl, metric_sample, saddle_value, w2_circle
from .grid import Density, PeriodicGrid
from .payoff import Payoff, sup_norm
from .spectral import spectral_gap

log = logging.getLogger(__name__)

FIT_START = 0.1
NOISE_FLOOR = 1e-18
FLOOR_FACTOR = 100.0
MIN_FIT_POINTS = 10
MONOTONE_SLACK = 1e-18
EVI_TOL = 1e-4
EVI_FRACTION = 0.9


@dataclass(frozen=True)
class RateFit:
    lambda_hat: float
    window: tuple[float, float]
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def energy(sample: MetricSample) -> float:
    return sample.energy


def auto_window(samples, t_start: float = FIT_START,
                floor: float = FLOOR_FACTOR * NOISE_FLOOR) -> tuple[float, float]:
    """``[t_start, t_b]`` where ``t_b`` is the last time before E first drops under ``floor``."""
    t_b = t_start
    for s in samples:
        if s.t < t_start:
            continue
        if energy(s) < floor:
            break
        t_b = s.t
    return (t_start, t_b)


def fit_rate(samples, window=None) -> RateFit:
    """Least-squares slope of ``log E`` over the window; ``lambda_hat = -slope / 2``."""
    if window is None:
        window = auto_window(samples)
    t_a, t_b = window
    picked = [s for s in samples if t_a - 1e-12 <= s.t <= t_b + 1e-12]
    if len(picked) < MIN_FIT_POINTS:
        raise InsufficientData(f"{len(picked)} samples in [{t_a:g}, {t_b:g}], need {MIN_FIT_POINTS}")
    t = np.array([s.t for s in picked])
    e = np.array([energy(s) for s in picked])
    if np.any(e <= 0.0):
        raise NonPositiveEnergy(f"E <= 0 at t = {t[e <= 0.0][0]:g}")
    if np.any(e < NOISE_FLOOR):
        raise InsufficientData(f"E below the noise floor {NOISE_FLOOR:g} inside the window")
    y = np.log(e)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(-slope / 2.0), (float(t[0]), float(t[-1])), float(min(max(r2, 0.0), 1.0)), len(picked))


# -- manifests -------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    payoff: dict
    grid: int
    tolerances: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    versions: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def __post_init__(self):
        if not self.versions:
            self.versions = {"mflda": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                             "python": platform.python_version()}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "RunManifest":
        return cls(**data)


# -- trajectory checks -----------------------------------------------------------------


def trajectory_metrics(rec, eq: EquilibriumPair, f: Payoff) -> list[MetricSample]:
    return [metric_sample(t, m, n, eq, f) for t, m, n in zip(rec.times, rec.mu_snapshots, rec.nu_snapshots)]


def monotone_after(samples, t_start: float = FIT_START, slack: float = MONOTONE_SLACK) -> dict:
    """Largest increase of E between consecutive samples with ``t >= t_start``."""
    e = np.array([energy(s) for s in samples if s.t >= t_start - 1e-12])
    worst = float(np.max(np.diff(e))) if e.size > 1 else 0.0
    return {"max_increase": worst, "slack": slack, "pass": worst <= slack}


def evi_check(rec, samples, eq: EquilibriumPair, f: Payoff, lam: float,
              t_start: float = FIT_START, tol: float = EVI_TOL) -> dict:
    """Discrete EVI for both players at every sampled ``t >= t_start``.

    x:  d/dt W2(mu_t, mu*)^2 / 2 <= F(mu*, nu_t) - F(mu_t, nu_t) - lam/2 W2^2 + tol
    y:  d/dt W2(nu_t, nu*)^2 / 2 <= F(mu_t, nu_t) - F(mu_t, nu*) - lam/2 W2^2 + tol

    The derivative is a central difference between neighbouring snapshots
    (one-sided at the ends).
    """
    t = np.array(rec.times)
    hx = 0.5 * np.array([s.w2_mu**2 for s in samples])
    hy = 0.5 * np.array([s.w2_nu**2 for s in samples])
    dx = np.gradient(hx, t)
    dy = np.gradient(hy, t)
    worst = -np.inf
    for i, ti in enumerate(t):
        if ti < t_start - 1e-12:
            continue
        mu, nu = rec.mu_snapshots[i], rec.nu_snapshots[i]
        fv = samples[i].f_value
        rhs_x = saddle_value(f, eq.mu_star, nu) - fv - lam * hx[i]
        rhs_y = fv - saddle_value(f, mu, eq.nu_star) - lam * hy[i]
        worst = max(worst, dx[i] - rhs_x, dy[i] - rhs_y)
    worst = float(worst) if np.isfinite(worst) else 0.0
    return {"max_violation": worst, "lambda": lam, "tol": tol, "pass": worst <= tol}


def conservation_check(rec) -> dict:
    defect = rec.max_mass_defect
    lo = rec.worst_min_density
    return {"max_mass_defect": defect, "min_density": lo,
            "pass": defect <= 1e-12 and lo >= -1e-12}


# -- experiments -----------------------------------------------------------------------


def _random_direction(rng, grid, n_modes=4):
    x = grid.nodes
    out = np.zeros_like(x)
    for k in range(1, n_modes + 1):
        out += rng.normal() / k * np.cos(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    return out


def run_local(f: Payoff, eq: EquilibriumPair, lam_gap: float, mu0: Density, nu0: Density,
              cfg: EvolverConfig) -> dict:
    """Evolve one start, evaluate metrics, fit the rate; never raises on check failures."""
    rec = evolve(mu0, nu0, f, cfg)
    samples = trajectory_metrics(rec, eq, f)
    out = {
        "times": rec.times,
        "energy": [energy(s) for s in samples],
        "kl": [s.kl_mu + s.kl_nu for s in samples],
        "ni": [s.ni for s in samples],
        "monotone": monotone_after(samples),
        "evi": evi_check(rec, samples, eq, f, EVI_FRACTION * lam_gap),
        "conservation": conservation_check(rec),
    }
    try:
        out["fit"] = fit_rate(samples).to_dict()
    except MFLDAError as exc:
        out["fit"] = None
        out["fit_error"] = f"{type(exc).__name__}: {exc}"
    return out


def experiment_local_stability(f: Payoff, n_grid: int = 256, epsilons=(0.01,), dt: float = 1e-4,
                               t_end: float = 1.0, stride: int = 100, n_random: int = 3,
                               seed: int = 0, rate_floor: float = 0.8, workers: int = 1) -> dict:
    """Perturb the equilibrium, evolve, and compare the measured decay with the gap.

    Checks, per start: E nonincreasing after t = 0.1, the EVI at every
    sample, and conservation; eigen-direction starts must also decay at
    ``>= rate_floor * lambda_gap``. Failures are recorded, never raised.
    """
    t0 = time.perf_counter()
    grid = PeriodicGrid(n_grid)
    manifest = RunManifest("report", f.to_dict(), n_grid,
                           tolerances={"evi": EVI_TOL, "monotone_slack": MONOTONE_SLACK,
                                       "noise_floor": NOISE_FLOOR, "rate_floor": rate_floor},
                           seeds=[seed],
                           parameters={"epsilons": list(epsilons), "dt": dt, "t_end": t_end,
                                       "stride": stride, "n_random": n_random})
    report = {"manifest": None, "runs": [], "pass": False}
    try:
        eq = solve_mne_robust(f, grid)
        gap = spectral_gap(eq, f)
        report["equilibrium"] = {"residual_mu": eq.residual_mu, "residual_nu": eq.residual_nu,
                                 "iterations": eq.iterations, "sup_norm": sup_norm(f)}
        report["spectral"] = gap.to_dict()
        lam = gap.lambda_gap
        cfg = EvolverConfig(dt, t_end, stride)
        rng = np.random.default_rng(seed)
        cells = []
        for eps in epsilons:
            cells.append((eps, "eigen", gap.eigenfunction_x.values, gap.eigenfunction_y.values))
            for i in range(n_random):
                cells.append((eps, f"random{i}", _random_direction(rng, grid), _random_direction(rng, grid)))

        def run_cell(cell):
            eps, name, dx, dy = cell
            mu0, nu0 = perturb(eq.mu_star, dx, eps), perturb(eq.nu_star, dy, eps)
            run = run_local(f, eq, lam, mu0, nu0, cfg)
            run.update(epsilon=eps, direction=name)
            checks = [run["monotone"]["pass"], run["evi"]["pass"], run["conservation"]["pass"]]
            if name == "eigen":
                fit = run["fit"]
                ratio = fit["lambda_hat"] / lam if fit else float("nan")
                run["rate_ratio"] = ratio
                run["rate_pass"] = bool(fit) and ratio >= rate_floor
                checks.append(run["rate_pass"])
            run["pass"] = bool(all(checks))
            log.info("eps=%g %s: pass=%s", eps, name, run["pass"])
            return run

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                report["runs"] = list(pool.map(run_cell, cells))
        else:
            report["runs"] = [run_cell(c) for c in cells]
        ok = all(r["pass"] for r in report["runs"])
        report["pass"] = bool(ok)
    except MFLDAError as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        report["pass"] = False
    manifest.wall_clock = time.perf_counter() - t0
    report["manifest"] = manifest.to_dict()
    return report


def heat_solution(mu0: Density, t: float) -> Density:
    """Exact periodic heat flow on the grid (Fourier multiplier)."""
    n = mu0.grid.n_points
    k = np.fft.rfftfreq(n, d=1.0 / n)
    vals = np.fft.irfft(np.fft.rfft(mu0.values) * np.exp(-((2 * np.pi * k) ** 2) * t), n)
    return Density.from_values(mu0.grid, vals)


def histogram_kl(positions, ref: Density) -> float:
    return kl(histogram_density(positions, ref.grid), ref)


def experiment_particle_consistency(f: Payoff, particle_counts=(1000, 10000), seed: int = 0,
                                    n_grid: int = 64, dt: float = 1e-3, t_end: float = 0.5,
                                    n_seeds: int = 5) -> dict:
    """Histogram-vs-PDE KL at ``t_end`` for increasing particle counts.

    Both systems start from the same smooth density. The grid reference
    is the exact heat solution when ``f`` is zero and an ETD1 run
    otherwise. Asserts the median KL over ``n_seeds`` seeds is
    nonincreasing in the particle count, and records the noise-free
    deposition-vs-moments drift discrepancy on the final ensemble.
    """
    t0 = time.perf_counter()
    grid = PeriodicGrid(n_grid)
    seeds = [seed + i for i in range(n_seeds)]
    manifest = RunManifest("particles-consistency", f.to_dict(), n_grid, seeds=seeds,
                           parameters={"particle_counts": list(particle_counts), "dt": dt, "t_end": t_end})
    x = grid.nodes
    mu0 = Density.from_values(grid, 1.0 + 0.5 * np.cos(2 * np.pi * x))
    nu0 = Density.from_values(grid, 1.0 + 0.5 * np.sin(2 * np.pi * x))
    if f.terms:
        rec = evolve(mu0, nu0, f, EvolverConfig(dt / 10, t_end, 10**9))
        ref_mu, ref_nu = rec.mu_snapshots[-1], rec.nu_snapshots[-1]
    else:
        ref_mu, ref_nu = heat_solution(mu0, t_end), heat_solution(nu0, t_end)
    rows = []
    last = None
    for n_p in particle_counts:
        kls = []
        for s in seeds:
            ens = ParticleEnsemble.sample(mu0, nu0, n_p, seed=s, dt=dt)
            ens = run_particles(ens, f, grid, t_end)
            kls.append(histogram_kl(ens.positions_x, ref_mu) + histogram_kl(ens.positions_y, ref_nu))
            last = ens
        rows.append({"n_particles": n_p, "kl": kls, "median_kl": float(np.median(kls))})
    medians = [r["median_kl"] for r in rows]
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    fine = PeriodicGrid(256)
    exact = particle_drift(last, f, fine, "moments")
    approx = particle_drift(last, f, fine, "deposit", "cubic", deconvolve=True)
    drift_gap = max(float(np.abs(exact[0] - approx[0]).max(initial=0.0)),
                    float(np.abs(exact[1] - approx[1]).max(initial=0.0)))
    manifest.wall_clock = time.perf_counter() - t0
    return {"manifest": manifest.to_dict(), "rows": rows, "kl_nonincreasing": monotone,
            "drift_gap": drift_gap, "pass": bool(monotone)}


def particle_variance(n_particles: int = 100_000, dt: float = 1e-3, t_end: float = 0.05,
                      seed: int = 0) -> dict:
    """Free Brownian spread from a point: ``Var(displacement) = 2t``."""
    grid = PeriodicGrid(64)
    ens = ParticleEnsemble.at_point(n_particles, seed=seed, dt=dt)
    ens = run_particles(ens, Payoff.zero(), grid, t_end)
    var = float(np.var(ens.displacement_x))
    return {"variance": var, "expected": 2 * t_end, "rel_error": abs(var / (2 * t_end) - 1.0)}
