import numpy as np
import pytest

from conftest import random_density
from mflda.dynamics import (EvolverConfig, drift_residual, evolve, initial_pair, pde_step,
                            pde_step_info, perturb)
from mflda.equilibrium import solve_mne, solve_mne_robust
from mflda.errors import StepUnstable
from mflda.geometry import w2_circle
from mflda.grid import Density, PeriodicGrid
from mflda.harness import trajectory_metrics, monotone_after
from mflda.payoff import DECOUPLED, Payoff, Term, convexity_constant, random_payoff

TWO_PI = 2 * np.pi


def cos_density(grid, amp=0.1, k=1):
    return Density.from_values(grid, 1 + amp * np.cos(TWO_PI * k * grid.nodes))


class TestHeat:
    @pytest.mark.parametrize("t_end", [0.01, 0.05, 0.2])
    def test_exact_fourier_decay(self, t_end):
        g = PeriodicGrid(128)
        mu0 = cos_density(g)
        rec = evolve(mu0, mu0, Payoff.zero(), EvolverConfig(dt=1e-3, t_end=t_end))
        exact = 1 + 0.1 * np.exp(-4 * np.pi**2 * t_end) * np.cos(TWO_PI * g.nodes)
        assert rec.times[-1] == t_end
        assert np.abs(rec.mu_snapshots[-1].values - exact).max() <= 1e-8
        assert np.abs(rec.nu_snapshots[-1].values - exact).max() <= 1e-8

    def test_w2_decays_at_flat_rate(self):
        # checked where W2 still sits well above the double-precision floor (~1e-16)
        g = PeriodicGrid(128)
        u = Density.uniform(g)
        mu0 = cos_density(g, 0.5)
        nu0 = Density.from_values(g, 1 + 0.5 * np.sin(4 * np.pi * g.nodes))
        rec = evolve(mu0, nu0, Payoff.zero(), EvolverConfig(dt=1e-3, t_end=0.6, snapshot_stride=100))
        w0 = w2_circle(mu0, u) + w2_circle(nu0, u)
        for t, m, n in zip(rec.times[1:], rec.mu_snapshots[1:], rec.nu_snapshots[1:]):
            w = w2_circle(m, u) + w2_circle(n, u)
            assert w <= np.exp(-4 * np.pi**2 * 0.9 * t) * w0

    @pytest.mark.xfail(reason="W2 at t = 1 is below the double-precision floor of the grid densities",
                       strict=True)
    def test_w2_flat_rate_at_unit_time(self):
        g = PeriodicGrid(128)
        u = Density.uniform(g)
        mu0 = cos_density(g, 0.5)
        nu0 = Density.from_values(g, 1 + 0.5 * np.sin(4 * np.pi * g.nodes))
        rec = evolve(mu0, nu0, Payoff.zero(), EvolverConfig(dt=1e-3, t_end=1.0, snapshot_stride=1000))
        w0 = w2_circle(mu0, u) + w2_circle(nu0, u)
        w1 = w2_circle(rec.mu_snapshots[-1], u) + w2_circle(rec.nu_snapshots[-1], u)
        assert w1 <= np.exp(-4 * np.pi**2 * 0.9) * w0


class TestStationarity:
    def test_mne_is_fixed_point(self):
        g = PeriodicGrid(128)
        eq = solve_mne(DECOUPLED, g)
        rec = evolve(eq.mu_star, eq.nu_star, DECOUPLED,
                     EvolverConfig(dt=5e-4, t_end=10.0, snapshot_stride=2000))
        assert rec.times[-1] == 10.0
        for m, n in zip(rec.mu_snapshots, rec.nu_snapshots):
            assert np.abs(m.values - eq.mu_star.values).max() <= 1e-8
            assert np.abs(n.values - eq.nu_star.values).max() <= 1e-8

    def test_drift_vanishes_at_mne(self, rng):
        g = PeriodicGrid(128)
        for _ in range(6):
            f = random_payoff(rng)
            eq = solve_mne_robust(f, g, tol=1e-12)
            gx, gy = drift_residual(f, eq.mu_star, eq.nu_star)
            assert max(gx, gy) <= 10 * 1e-12

    def test_drift_nonzero_off_equilibrium(self):
        g = PeriodicGrid(64)
        u = Density.uniform(g)
        assert max(drift_residual(DECOUPLED, u, u)) > 1.0


def test_time_self_convergence():
    g = PeriodicGrid(64)
    f = Payoff((Term(0.8, 1, 1, 0.3), Term(0.5, 2, 0, 0.0), Term(-0.4, 0, 1, 1.0)))
    mu0 = cos_density(g, 0.4)
    nu0 = cos_density(g, 0.4, k=2)

    def run(dt):
        mu, nu = mu0, nu0
        for _ in range(round(1.0 / dt)):
            mu, nu = pde_step(mu, nu, f, dt)
        return np.concatenate([mu.values, nu.values])

    a, b, c = run(0.02), run(0.01), run(0.005)
    order = np.log2(np.abs(a - b).max() / np.abs(b - c).max())
    assert order >= 0.9


class TestEvolver:
    def test_lyapunov_near_equilibrium(self, decoupled_eq):
        g = decoupled_eq.grid
        mu0 = perturb(decoupled_eq.mu_star, np.cos(TWO_PI * g.nodes), 0.01)
        nu0 = perturb(decoupled_eq.nu_star, np.sin(TWO_PI * g.nodes), 0.01)
        rec = evolve(mu0, nu0, DECOUPLED, EvolverConfig(dt=1e-3, t_end=0.5, snapshot_stride=10))
        samples = trajectory_metrics(rec, decoupled_eq, DECOUPLED)
        assert monotone_after(samples)["pass"]

    def test_bit_identical(self):
        g = PeriodicGrid(64)
        eq = solve_mne(DECOUPLED, g)
        mu0, nu0 = initial_pair({"kind": "perturbed_mne", "epsilon": 0.05, "mode": 2}, g, DECOUPLED, eq)
        cfg = EvolverConfig(dt=1e-3, t_end=0.05, snapshot_stride=7)
        r1 = evolve(mu0, nu0, DECOUPLED, cfg)
        r2 = evolve(mu0, nu0, DECOUPLED, cfg)
        assert r1.times == r2.times
        for a, b in zip(r1.mu_snapshots + r1.nu_snapshots, r2.mu_snapshots + r2.nu_snapshots):
            assert np.array_equal(a.values, b.values)

    def test_final_time_exact_with_tail(self):
        g = PeriodicGrid(32)
        u = Density.uniform(g)
        rec = evolve(u, u, Payoff.zero(), EvolverConfig(dt=0.03, t_end=0.1, snapshot_stride=2))
        assert rec.times == [0.0, 0.06, 0.1]

    def test_cfl_substeps(self):
        g = PeriodicGrid(64)
        cfg = EvolverConfig(dt=0.01, t_end=0.02)
        limit = cfg.cfl_limit(DECOUPLED, g)
        assert limit == pytest.approx(0.5 / 64 / TWO_PI)
        u = Density.uniform(g)
        rec = evolve(u, u, DECOUPLED, cfg)
        assert max(rec.dt_used) <= limit
        assert rec.times[-1] == 0.02

    def test_conservation_logged(self, rng):
        g = PeriodicGrid(64)
        f = random_payoff(rng)
        mu0, nu0 = random_density(g, rng), random_density(g, rng)
        rec = evolve(mu0, nu0, f, EvolverConfig(dt=1e-3, t_end=0.1, snapshot_stride=10))
        assert rec.max_mass_defect <= 1e-12
        assert rec.worst_min_density >= -1e-12
        assert len(rec.mass_defect) == len(rec.dt_used) >= 100

    def test_stability_growth_cap(self, rng):
        g = PeriodicGrid(64)
        eq = solve_mne(DECOUPLED, g)
        lam_prime = convexity_constant(DECOUPLED)
        assert lam_prime <= 0
        mu0, nu0 = random_density(g, rng, amplitude=3.0), random_density(g, rng, amplitude=3.0)
        rec = evolve(mu0, nu0, DECOUPLED, EvolverConfig(dt=1e-3, t_end=0.5, snapshot_stride=50))
        samples = trajectory_metrics(rec, eq, DECOUPLED)
        e0 = samples[0].energy
        for s in samples:
            assert s.energy <= np.exp(-2 * lam_prime * s.t) * e0 * (1 + 1e-3)


class TestStepping:
    def test_step_unstable(self):
        g = PeriodicGrid(32)
        spiky = np.full(32, 1e-14)
        spiky[0] = 1.0
        rho = Density.from_values(g, spiky)
        # Gibbs ringing of a near-delta goes negative at every step size
        with pytest.raises(StepUnstable):
            pde_step(rho, rho, Payoff.zero(), 1e-3, max_halvings=3)

    def test_halving_reported(self):
        g = PeriodicGrid(32)
        spiky = np.full(32, 1e-3)
        spiky[0] = 1.0
        rho = Density.from_values(g, spiky)
        f = Payoff((Term(5.0, 1, 1, 0.0),))
        mu, nu, info = pde_step_info(rho, rho, f, 0.05)
        assert info.substeps >= 1
        assert info.dt_used * info.substeps == pytest.approx(0.05)
        assert mu.values.min() >= 0

    @pytest.mark.parametrize("kw", [dict(dt=0.0, t_end=1.0), dict(dt=1e-3, t_end=-1.0),
                                    dict(dt=1e-3, t_end=1.0, snapshot_stride=0),
                                    dict(dt=1e-3, t_end=1.0, cfl_safety=1.5)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            EvolverConfig(**kw)


class TestInitialPair:
    def test_uniform(self):
        g = PeriodicGrid(32)
        mu, nu = initial_pair({"kind": "uniform"}, g, DECOUPLED)
        assert np.all(mu.values == 1.0) and np.all(nu.values == 1.0)

    def test_gibbs(self):
        g = PeriodicGrid(64)
        mu, _ = initial_pair({"kind": "gibbs", "potential_terms": [{"a": 1.0, "k": 1}]}, g, DECOUPLED)
        ref = np.exp(-np.cos(TWO_PI * g.nodes))
        assert np.allclose(mu.values, ref / ref.mean(), rtol=1e-13)

    def test_perturbed_mne(self):
        g = PeriodicGrid(64)
        eq = solve_mne(DECOUPLED, g)
        mu, nu = initial_pair({"kind": "perturbed_mne", "epsilon": 0.01, "mode": 1}, g, DECOUPLED, eq)
        rel = mu.values / eq.mu_star.values - 1
        assert 0.005 < np.abs(rel).max() <= 0.0101

    def test_eigen_mode_requires_eigenfunctions(self):
        g = PeriodicGrid(64)
        eq = solve_mne(DECOUPLED, g)
        with pytest.raises(ValueError):
            initial_pair({"kind": "perturbed_mne", "mode": "eigen"}, g, DECOUPLED, eq)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            initial_pair({"kind": "dirac"}, PeriodicGrid(32), DECOUPLED)
