"""Numerical lab for entropy-regularized zero-sum games on the circle."""

__version__ = "0.1.0"

from .equilibrium import EquilibriumPair, certify, gibbs, solve_mne, solve_mne_robust
from .geometry import entropy, kl, ni_error, saddle_value, w2_circle, w2_oracle
from .grid import Density, GridFunction, PeriodicGrid
from .payoff import DECOUPLED, Payoff, Term
from .spectral import spectral_gap

__all__ = [
    "DECOUPLED", "Density", "EquilibriumPair", "GridFunction", "Payoff", "PeriodicGrid", "Term",
    "certify", "entropy", "gibbs", "kl", "ni_error", "saddle_value", "solve_mne", "solve_mne_robust",
    "spectral_gap", "w2_circle", "w2_oracle",
]
