"""Frozen reference values agree with the computations that produced them."""

import numpy as np
from scipy.special import i0

import oracles


def test_bessel_value():
    assert abs(oracles.I0_1 - float(i0(1.0))) < 1e-15
    assert abs(oracles.bessel_i0_1() - oracles.I0_1) < 1e-12


def test_entropy_oracle():
    assert abs(oracles.entropy_cos_bessel() - oracles.ENTROPY_COS) < 1e-15


def test_schrodinger_gap_converged_in_modes():
    assert abs(oracles.schrodinger_gap(40) - oracles.LAMBDA_DECOUPLED) < 1e-10
    assert abs(oracles.schrodinger_gap(60) - oracles.LAMBDA_DECOUPLED) < 1e-10


def test_schrodinger_flat_limit():
    # without the potential the same code must return 4 pi^2
    ks = np.arange(-10, 11)
    assert np.sort((2 * np.pi * ks) ** 2)[1] == oracles.FOUR_PI_SQ
