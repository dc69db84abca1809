"""Metrics on pairs of densities: entropy, KL, the saddle functional, NI, W2.

Also holds the first/second-variation evaluators along displacement curves
``t -> (id + t phi')_# mu``, used to check the analytic variation formulas
against finite differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import linprog
from scipy.special import xlogy

from .equilibrium import EquilibriumPair, gibbs, log_partition
from .errors import GridTooLarge, JacobianDegenerate, SupportMismatch
from .grid import Density, GridFunction, cumulative, diff_values
from .payoff import Payoff, induced_potentials

NI_CLAMP = 1e-10
SEARCH_ITERS = 100
SEARCH_XTOL = 1e-15
INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0
ORACLE_MAX_N = 128
FLAT_CDF = 1e-12


def entropy(rho: Density) -> float:
    """``int rho log rho`` with ``0 log 0 = 0`` (negative differential entropy)."""
    return float(rho.grid.spacing * np.sum(xlogy(rho.values, rho.values)))


def kl(rho: Density, pi: Density) -> float:
    """Relative entropy ``int rho log(rho / pi)``."""
    r, p = rho.values, pi.values
    support = r > 0
    if np.any(p[support] <= 0):
        raise SupportMismatch("reference density vanishes on the support of rho")
    val = rho.grid.spacing * np.sum(r[support] * (np.log(r[support]) - np.log(p[support])))
    return float(max(val, 0.0)) if val > -1e-14 else float(val)


def saddle_value(f: Payoff, mu: Density, nu: Density) -> float:
    """``F(mu, nu) = iint f dmu dnu + H(mu) - H(nu)``."""
    V, _ = induced_potentials(f, mu, nu)
    return mu.grid.quadrature(V.values * mu.values) + entropy(mu) - entropy(nu)


def ni_error(f: Payoff, mu: Density, nu: Density) -> float:
    """Nikaido-Isoda error through its closed form.

    ``H(mu) + H(nu) + log int exp(U_mu) + log int exp(-V_nu)``; values in
    ``[-1e-10, 0)`` are rounding and are clamped to zero.
    """
    V, U = induced_potentials(f, mu, nu)
    val = entropy(mu) + entropy(nu) + log_partition(U) + log_partition(-V)
    if -NI_CLAMP <= val < 0.0:
        return 0.0
    return float(val)


def ni_by_definition(f: Payoff, mu: Density, nu: Density) -> float:
    """``max_nu' F(mu, nu') - min_mu' F(mu', nu)`` evaluated at the Gibbs best responses."""
    V, U = induced_potentials(f, mu, nu)
    return saddle_value(f, mu, gibbs(U)) - saddle_value(f, gibbs(-V), nu)


# -- Wasserstein distance on the circle ------------------------------------------------


def _lifted_cdf(rho: Density) -> np.ndarray:
    """CDF at the nodes: spectral antiderivative when monotone, trapezoid otherwise."""
    r = rho.values
    cdf = cumulative(r)
    if np.all(np.diff(np.append(cdf, 1.0)) > 0.0):
        return cdf
    cells = 0.5 * rho.grid.spacing * (r + np.roll(r, -1))
    cdf = np.concatenate([[0.0], np.cumsum(cells)[:-1]])
    return cdf / cells.sum()


def _lifted_quantile(rho: Density) -> PchipInterpolator:
    """Monotone interpolant of the quantile function of the lifted CDF.

    The CDF is extended to ``x in [-2, 3]`` with ``F(x + 1) = F(x) + 1`` and
    inverted; stretches of zero density collapse to single knots.
    """
    cdf = _lifted_cdf(rho)
    shifts = np.arange(-2, 3)
    xs = np.append((rho.grid.nodes[None, :] + shifts[:, None]).ravel(), 3.0)
    fs = np.append((cdf[None, :] + shifts[:, None]).ravel(), 3.0)
    # keep both ends of every flat run; the right end is lifted by a hair so
    # the quantile jumps across the gap instead of ramping through it
    rising = np.diff(fs) >= FLAT_CDF
    first = np.concatenate([[True], rising])
    last = np.concatenate([rising, [True]])
    fs = fs + np.where(last & ~first, FLAT_CDF / 10, 0.0)
    keep = first | last
    return PchipInterpolator(fs[keep], xs[keep], extrapolate=False)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def _coupling_cost(qa: PchipInterpolator, qb: PchipInterpolator, theta: float) -> float:
    """``int_0^1 |Q_a(q) - Q_b(q + theta)|^2 dq``, exact for the piecewise cubics.

    Four-point Gauss-Legendre on every cell of the merged breakpoint set
    integrates the squared cubic difference without error.
    """
    ka = qa.x[(qa.x > 0.0) & (qa.x < 1.0)]
    kb = qb.x - theta
    kb = kb[(kb > 0.0) & (kb < 1.0)]
    br = np.unique(np.concatenate([[0.0, 1.0], ka, kb]))
    lo, width = br[:-1], np.diff(br)
    q = lo[:, None] + 0.5 * width[:, None] * (_GL_NODES[None, :] + 1.0)
    diff = qa(q) - qb(q + theta)
    return float(np.sum(0.5 * width[:, None] * _GL_WEIGHTS[None, :] * diff**2))


def w2_circle(rho: Density, sigma: Density, return_shift: bool = False):
    """W2 on the unit circle by the circular quantile coupling.

    ``W2^2 = min_theta int_0^1 |Q_rho(q) - Q_sigma(q + theta)|^2 dq`` with
    lifted quantile functions; the objective is convex in ``theta`` for the
    quadratic cost, so a bracketing search on ``[-1, 1]`` is safe.
    """
    qa = _lifted_quantile(rho)
    qb = _lifted_quantile(sigma)

    def cost(theta):
        return _coupling_cost(qa, qb, theta)

    # golden-section form of ternary search: one new evaluation per step
    lo, hi = -1.0, 1.0
    m1, m2 = hi - INV_PHI * (hi - lo), lo + INV_PHI * (hi - lo)
    c1, c2 = cost(m1), cost(m2)
    for _ in range(SEARCH_ITERS):
        if hi - lo <= SEARCH_XTOL:
            break
        if c1 <= c2:
            hi, m2, c2 = m2, m1, c1
            m1 = hi - INV_PHI * (hi - lo)
            c1 = cost(m1)
        else:
            lo, m1, c1 = m1, m2, c2
            m2 = lo + INV_PHI * (hi - lo)
            c2 = cost(m2)
    theta = 0.5 * (lo + hi)
    w2 = float(np.sqrt(max(cost(theta), 0.0)))
    return (w2, theta) if return_shift else w2


def torus_cost(x, y):
    d = np.abs(np.subtract.outer(x, y)) % 1.0
    return np.minimum(d, 1.0 - d) ** 2


def w2_oracle(rho: Density, sigma: Density) -> float:
    """Exact W2 between the two grid measures (atoms ``h rho_j`` at ``x_j``).

    Solves the transportation linear program with torus cost; only meant as
    an independent check on small grids.
    """
    n = rho.grid.n_points
    if n > ORACLE_MAX_N or sigma.grid.n_points > ORACLE_MAX_N:
        raise GridTooLarge(f"w2_oracle is limited to N <= {ORACLE_MAX_N}")
    a = rho.grid.spacing * rho.values
    b = sigma.grid.spacing * sigma.values
    ia = np.nonzero(a > 0)[0]
    ib = np.nonzero(b > 0)[0]
    a, b = a[ia] / a[ia].sum(), b[ib] / b[ib].sum()
    C = torus_cost(rho.grid.nodes[ia], sigma.grid.nodes[ib])
    m, k = len(ia), len(ib)
    rows = sp.kron(sp.eye(m), np.ones((1, k)))
    cols = sp.kron(np.ones((1, m)), sp.eye(k))
    A_eq = sp.vstack([rows, cols]).tocsr()
    b_eq = np.concatenate([a, b])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(np.sqrt(max(res.fun, 0.0)))


# -- variations along displacement curves ----------------------------------------------


@dataclass(frozen=True)
class VariationDirection:
    """Potential ``phi`` of a gradient direction, normalized to zero mean."""

    phi: GridFunction

    def __post_init__(self):
        v = self.phi.values
        object.__setattr__(self, "phi", GridFunction(self.phi.grid, v - v.mean()))

    @property
    def d1(self) -> np.ndarray:
        return diff_values(self.phi.values, 1)

    @property
    def d2(self) -> np.ndarray:
        return diff_values(self.phi.values, 2)

    def max_step(self) -> float:
        """Largest ``|t|`` for which ``1 + t phi''`` stays positive."""
        m = np.abs(self.d2).max()
        return np.inf if m == 0 else 1.0 / m


def displacement_energy(f: Payoff, mu: Density, nu_fixed: Density, direction: VariationDirection,
                        t: float, eps_jac: float = 1e-6) -> float:
    """``G(t) = F((id + t phi')_# mu, nu) + H(nu)`` by exact change of variables.

    ``G(t) = int [log(rho / (1 + t phi'')) + V(x + t phi')] rho dx``;
    nothing is resampled, so the only error is the rectangle rule.
    """
    rho = mu.values
    jac = 1.0 + t * direction.d2
    if jac.min() < eps_jac:
        raise JacobianDegenerate(f"1 + t*phi'' reaches {jac.min():.3e} at t={t:g}")
    moments = f.y_moments(nu_fixed)
    x = mu.grid.nodes + t * direction.d1
    pos = rho > 0
    integrand = np.zeros_like(rho)
    integrand[pos] = (np.log(rho[pos] / jac[pos]) + f.potential_x(moments, x[pos])) * rho[pos]
    return mu.grid.quadrature(integrand)


def first_variation(f: Payoff, mu: Density, nu_fixed: Density, direction: VariationDirection) -> float:
    """``int (d log rho + V') phi' rho``."""
    rho = mu.values
    dlog = diff_values(np.log(rho), 1)
    vp = f.V(nu_fixed, mu.grid.nodes, order=1)
    return mu.grid.quadrature((dlog + vp) * direction.d1 * rho)


def first_variation_check(f: Payoff, mu: Density, nu_fixed: Density, direction: VariationDirection,
                          t0: float = 1e-2) -> dict:
    """Analytic first variation against the central difference of ``G``."""
    analytic = first_variation(f, mu, nu_fixed, direction)
    gp = displacement_energy(f, mu, nu_fixed, direction, t0)
    gm = displacement_energy(f, mu, nu_fixed, direction, -t0)
    fd = (gp - gm) / (2 * t0)
    return {"analytic": analytic, "fd": fd, "gap": abs(fd - analytic), "t0": t0}


def second_variation(f: Payoff, mu: Density, nu_fixed: Density, direction: VariationDirection) -> float:
    """``int (phi''^2 + V'' phi'^2) rho``, the second derivative of ``G`` at 0."""
    vpp = f.V(nu_fixed, mu.grid.nodes, order=2)
    return mu.grid.quadrature((direction.d2**2 + vpp * direction.d1**2) * mu.values)


def second_variation_check(f: Payoff, mu: Density, nu_fixed: Density, direction: VariationDirection,
                           t0: float = 1e-2) -> dict:
    analytic = second_variation(f, mu, nu_fixed, direction)
    g0 = displacement_energy(f, mu, nu_fixed, direction, 0.0)
    gp = displacement_energy(f, mu, nu_fixed, direction, t0)
    gm = displacement_energy(f, mu, nu_fixed, direction, -t0)
    fd = (gp - 2 * g0 + gm) / t0**2
    return {"analytic": analytic, "fd": fd, "gap": abs(fd - analytic), "t0": t0}


def second_variation_ascent(f: Payoff, mu_fixed: Density, nu: Density, direction: VariationDirection) -> float:
    """Curvature of ``nu -> -F(mu, nu)`` along ``(id + t psi')_# nu``.

    ``int (psi''^2 - U'' psi'^2) dnu``: the maximizing player's confining
    potential is ``-U`` because its best response is ``exp(+U)``.
    """
    upp = f.U(mu_fixed, nu.grid.nodes, order=2)
    return nu.grid.quadrature((direction.d2**2 - upp * direction.d1**2) * nu.values)


def bakry_form(rho: Density, potential: GridFunction, direction: VariationDirection) -> float:
    """``int (phi'' - phi' W')^2 rho``; equals the second variation when ``rho ~ exp(-W)``."""
    wp = diff_values(potential.values, 1)
    return rho.grid.quadrature((direction.d2 - direction.d1 * wp) ** 2 * rho.values)


# -- per-snapshot metric bundle -----------------------------------------------------------


@dataclass(frozen=True)
class MetricSample:
    t: float
    w2_mu: float
    w2_nu: float
    kl_mu: float
    kl_nu: float
    ni: float
    f_value: float
    mass_mu: float
    mass_nu: float
    min_mu: float
    min_nu: float

    @property
    def energy(self) -> float:
        """``W2(mu, mu*)^2 + W2(nu, nu*)^2``."""
        return self.w2_mu**2 + self.w2_nu**2

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_COLUMNS = ("t", "w2_mu", "w2_nu", "kl_mu", "kl_nu", "ni", "f_value",
                  "mass_mu", "mass_nu", "min_mu", "min_nu")


def metric_sample(t: float, mu: Density, nu: Density, eq: EquilibriumPair, f: Payoff) -> MetricSample:
    return MetricSample(
        t=float(t),
        w2_mu=w2_circle(mu, eq.mu_star),
        w2_nu=w2_circle(nu, eq.nu_star),
        kl_mu=kl(mu, eq.mu_star),
        kl_nu=kl(nu, eq.nu_star),
        ni=ni_error(f, mu, nu),
        f_value=saddle_value(f, mu, nu),
        mass_mu=mu.mass,
        mass_nu=nu.mass,
        min_mu=float(mu.values.min()),
        min_nu=float(nu.values.min()),
    )
