import sys

import numpy as np
import pytest

from mflda.equilibrium import solve_mne
from mflda.grid import Density, GridFunction, PeriodicGrid
from mflda.payoff import DECOUPLED


def random_density(grid, rng, n_modes=4, amplitude=1.0):
    """exp of a random trigonometric polynomial, normalized."""
    x = grid.nodes
    w = np.zeros_like(x)
    for k in range(1, n_modes + 1):
        w += amplitude * rng.normal() / k * np.cos(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    return Density.from_values(grid, np.exp(w - w.max()))


def random_potential(grid, rng, n_modes=3, scale=1.0):
    """Band-limited direction with |phi''| of order ``scale``."""
    x = grid.nodes
    v = np.zeros_like(x)
    for k in range(1, n_modes + 1):
        v += scale * rng.normal() / (2 * np.pi * k) ** 2 * np.cos(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    return GridFunction(grid, v)


@pytest.fixture(scope="session")
def grid256():
    return PeriodicGrid(256)


@pytest.fixture(scope="session")
def decoupled_eq(grid256):
    return solve_mne(DECOUPLED, grid256)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
