"""Trigonometric payoffs ``f(x, y) = sum_m a_m cos(2 pi (k_m x + l_m y) + theta_m)``.

Restricting to finite trigonometric series makes every derivative and every
moment against a density exact, so potentials carry no quadrature error
beyond the rectangle rule applied to the density itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Density, GridFunction

MAX_FREQUENCY = 32
PROBE_POINTS = 512
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Term:
    a: float
    k: int
    l: int
    theta: float = 0.0

    def __post_init__(self):
        if int(self.k) != self.k or int(self.l) != self.l:
            raise ValueError("frequencies must be integers")
        if abs(self.k) > MAX_FREQUENCY or abs(self.l) > MAX_FREQUENCY:
            raise ValueError(f"|k|, |l| must be <= {MAX_FREQUENCY}, got k={self.k}, l={self.l}")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "l", int(self.l))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "theta", float(self.theta))


@dataclass(frozen=True)
class Payoff:
    terms: tuple[Term, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    # -- construction / serialization -------------------------------------------------

    @classmethod
    def zero(cls) -> "Payoff":
        return cls(())

    @classmethod
    def from_dict(cls, data) -> "Payoff":
        terms = []
        for t in data.get("terms", []):
            terms.append(Term(a=t["a"], k=t["k"], l=t["l"], theta=t.get("theta", 0.0)))
        return cls(tuple(terms))

    @classmethod
    def from_json(cls, path) -> "Payoff":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {"terms": [{"a": t.a, "k": t.k, "l": t.l, "theta": t.theta} for t in self.terms]}

    def __add__(self, other: "Payoff") -> "Payoff":
        return Payoff(self.terms + other.terms)

    @property
    def _arrays(self):
        a = np.array([t.a for t in self.terms], dtype=float)
        k = np.array([t.k for t in self.terms], dtype=float)
        l = np.array([t.l for t in self.terms], dtype=float)
        th = np.array([t.theta for t in self.terms], dtype=float)
        return a, k, l, th

    # -- pointwise evaluation --------------------------------------------------------

    def __call__(self, x, y, dx: int = 0, dy: int = 0):
        """Evaluate ``d^dx/dx d^dy/dy f`` with numpy broadcasting over x, y."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        order = dx + dy
        for t in self.terms:
            coef = t.a * (TWO_PI * t.k) ** dx * (TWO_PI * t.l) ** dy
            if coef == 0.0:
                continue
            # d^n/ds^n cos(s) = cos(s + n*pi/2)
            out += coef * np.cos(TWO_PI * (t.k * x + t.l * y) + t.theta + order * np.pi / 2)
        return out

    def probe(self, n: int = PROBE_POINTS, dx: int = 0, dy: int = 0) -> np.ndarray:
        """Values on the ``n x n`` tensor grid ``(i/n, j/n)``; rows index x."""
        s = np.arange(n) / n
        return self(s[:, None], s[None, :], dx, dy)

    def gradient_bounds(self) -> tuple[float, float]:
        """Upper bounds on ``sup|d_x f|`` and ``sup|d_y f|`` (triangle inequality)."""
        a, k, l, _ = self._arrays
        return float(np.sum(np.abs(a) * TWO_PI * np.abs(k))), float(np.sum(np.abs(a) * TWO_PI * np.abs(l)))

    # -- moments and induced potentials ----------------------------------------------

    def y_moments(self, nu: Density):
        """Per-term ``(int cos(2 pi l y) dnu, int sin(2 pi l y) dnu)``."""
        _, _, l, _ = self._arrays
        y = nu.grid.nodes
        ph = TWO_PI * np.outer(l, y)
        w = nu.grid.spacing * nu.values
        return np.cos(ph) @ w, np.sin(ph) @ w

    def x_moments(self, mu: Density):
        """Per-term ``(int cos(2 pi k x + theta) dmu, int sin(2 pi k x + theta) dmu)``."""
        _, k, _, th = self._arrays
        x = mu.grid.nodes
        ph = TWO_PI * np.outer(k, x) + th[:, None]
        w = mu.grid.spacing * mu.values
        return np.cos(ph) @ w, np.sin(ph) @ w

    def potential_x(self, moments, x, order: int = 0) -> np.ndarray:
        """``d^order/dx^order V(x)`` at arbitrary points given :meth:`y_moments`."""
        if not self.terms:
            return np.zeros(np.shape(x))
        a, k, _, th = self._arrays
        c, s = moments
        ph = TWO_PI * np.multiply.outer(np.asarray(x, dtype=float), k) + th + order * np.pi / 2
        amp = a * (TWO_PI * k) ** order
        return np.cos(ph) @ (amp * c) - np.sin(ph) @ (amp * s)

    def potential_y(self, moments, y, order: int = 0) -> np.ndarray:
        """``d^order/dy^order U(y)`` at arbitrary points given :meth:`x_moments`."""
        if not self.terms:
            return np.zeros(np.shape(y))
        a, _, l, _ = self._arrays
        c, s = moments
        ph = TWO_PI * np.multiply.outer(np.asarray(y, dtype=float), l) + order * np.pi / 2
        amp = a * (TWO_PI * l) ** order
        return np.cos(ph) @ (amp * c) - np.sin(ph) @ (amp * s)

    def V(self, nu: Density, x=None, order: int = 0) -> np.ndarray:
        x = nu.grid.nodes if x is None else x
        return self.potential_x(self.y_moments(nu), x, order)

    def U(self, mu: Density, y=None, order: int = 0) -> np.ndarray:
        y = mu.grid.nodes if y is None else y
        return self.potential_y(self.x_moments(mu), y, order)


def induced_potentials(f: Payoff, mu: Density, nu: Density):
    """``V(x) = int f(x, y) dnu(y)`` on mu's grid and ``U(y) = int f(x, y) dmu(x)`` on nu's grid."""
    return GridFunction(mu.grid, f.V(nu, mu.grid.nodes)), GridFunction(nu.grid, f.U(mu, nu.grid.nodes))


def convexity_constant(f: Payoff, n_probe: int = PROBE_POINTS) -> float:
    """Largest probed ``lam`` with ``f_xx >= lam`` and ``-f_yy >= lam``.

    For any payoff with genuine x- or y-dependence this is negative:
    periodic functions are never convex.
    """
    if not f.terms:
        return 0.0
    fxx = f.probe(n_probe, dx=2)
    fyy = f.probe(n_probe, dy=2)
    return float(min(fxx.min(), (-fyy).min()))


def sup_norm(f: Payoff, n_probe: int = PROBE_POINTS) -> float:
    """``max |f|`` over the probe grid; a lower bound on the true supremum."""
    if not f.terms:
        return 0.0
    return float(np.abs(f.probe(n_probe)).max())


def random_payoff(rng: np.random.Generator, n_terms: int = 3, max_amplitude: float = 1.0,
                  max_frequency: int = 4, marginal_terms: bool = True) -> Payoff:
    """Random payoff with amplitudes in ``[-max_amplitude, max_amplitude]``.

    Frequencies are drawn from ``[-max_frequency, max_frequency]`` excluding the
    all-zero pair (a constant term does not affect the game). With
    ``marginal_terms`` one pure-x and one pure-y term are appended: without
    them every mixed term averages out against the uniform pair, which is
    then already the equilibrium.
    """
    terms = []
    while len(terms) < n_terms:
        k, l = rng.integers(-max_frequency, max_frequency + 1, size=2)
        if k == 0 and l == 0:
            continue
        terms.append(Term(a=rng.uniform(-max_amplitude, max_amplitude), k=int(k), l=int(l),
                          theta=rng.uniform(0.0, 2 * np.pi)))
    if marginal_terms:
        for pure_x in (True, False):
            m = int(rng.integers(1, max_frequency + 1))
            terms.append(Term(a=rng.uniform(-max_amplitude, max_amplitude),
                              k=m if pure_x else 0, l=0 if pure_x else m,
                              theta=rng.uniform(0.0, 2 * np.pi)))
    return Payoff(tuple(terms))


DECOUPLED = Payoff((Term(1.0, 1, 0, 0.0), Term(-1.0, 0, 1, 0.0)))
"""``cos(2 pi x) - cos(2 pi y)``: each player sees a fixed cosine potential."""
