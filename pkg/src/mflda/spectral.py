"""Spectral gap of the linearized dynamics at the equilibrium.

Two independent discretizations are provided:

* :func:`generator_gap` - first nonzero eigenvalue of the weighted Laplacian
  ``-rho^{-1} (rho phi')'`` with a second-order finite-difference Dirichlet
  form (midpoint weights), optionally refined and Richardson-extrapolated.
* :func:`rayleigh_gap` - minimum of the fourth-order quotient
  ``int (phi''^2 + V'' phi'^2) rho / int phi'^2 rho`` over a real Fourier
  basis, with spectral differentiation inside the quadratures.

At a Gibbs density ``rho ~ exp(-V)`` the two coincide in the continuum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equilibrium import EquilibriumPair, gibbs
from .errors import EigenNotConverged, GibbsMismatch
from .grid import Density, GridFunction, diff_values, fourier_interpolate
from .payoff import Payoff, sup_norm

log = logging.getLogger(__name__)

RQ_TOL = 1e-12
MAX_ITER = 500
PENCIL_RESIDUAL_TOL = 1e-10
FOUR_PI2 = 4.0 * np.pi**2
GAP_REFINE = 4


@dataclass(frozen=True)
class EigenResult:
    value: float
    vector: np.ndarray = field(repr=False)
    iterations: int
    residual: float


def _inverse_iteration(A, B, X0, factorize, deflate, tol=RQ_TOL, max_iter=MAX_ITER,
                       shift0=-1.0, gram=None, residual_tol=None) -> EigenResult:
    """Smallest eigenpair of the symmetric pencil ``(A, B)`` on the deflated subspace.

    Block inverse iteration with a fixed shift followed by Rayleigh-Ritz on
    the block, so near-degenerate pairs (even/odd modes of a symmetric
    potential) separate at the rate ``lambda_1 / lambda_{p+1}`` instead of
    ``lambda_1 / lambda_2``. ``factorize(sigma)`` returns a solver for
    ``(A - sigma B) X = R``; ``gram(X)`` may supply a cancellation-free
    ``X^T A X``. The eigenvalue settles quadratically faster than the
    vector, so ``residual_tol`` optionally keeps iterating until the pencil
    residual is small too, or stops falling.
    """
    if gram is None:
        def gram(X):
            return X.T @ (A @ X)

    solve = factorize(shift0)
    X = deflate(np.array(X0, dtype=float))
    lam = np.inf
    best_res = np.inf
    for it in range(1, max_iter + 1):
        Y = deflate(solve(B @ X))
        Y, _ = np.linalg.qr(Y)
        Ar = gram(Y)
        Br = Y.T @ (B @ Y)
        theta, C = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
        X = Y @ C
        new = float(theta[0])
        change = abs(new - lam) / max(abs(new), 1e-300)
        lam = new
        if change <= tol:
            x = X[:, 0]
            x = x / np.sqrt(x @ (B @ x))
            r = A @ x - lam * (B @ x)
            res = float(np.linalg.norm(r) / max(abs(lam) * np.linalg.norm(B @ x), 1e-300))
            # stop at the tolerance or once rounding stalls the residual
            if residual_tol is None or res <= residual_tol or res > 0.9 * best_res:
                return EigenResult(lam, x, it, res)
            best_res = res
    raise EigenNotConverged(f"inverse iteration stalled after {max_iter} iterations (lambda~{lam:.6g})")


def dirichlet_pencil(rho: np.ndarray):
    """Sparse stiffness ``K`` and diagonal mass ``M`` for the weighted Dirichlet form.

    ``K`` collects ``h * w_{j+1/2} ((phi_{j+1}-phi_j)/h)^2`` with
    ``w_{j+1/2} = (rho_j + rho_{j+1})/2``; ``M = diag(h rho_j)``.
    """
    n = rho.shape[0]
    h = 1.0 / n
    w = 0.5 * (rho + np.roll(rho, -1)) / h
    diag = w + np.roll(w, 1)
    j = np.arange(n)
    jp = (j + 1) % n
    rows = np.concatenate([j, j, jp])
    cols = np.concatenate([j, jp, j])
    vals = np.concatenate([diag, -w, -w])
    K = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    M = sp.diags(h * rho).tocsc()
    return K, M


def _generator_raw(rho: np.ndarray, tol=RQ_TOL) -> EigenResult:
    K, M = dirichlet_pencil(rho)
    n = rho.shape[0]
    m_ones = M @ np.ones(n)
    total = m_ones.sum()

    def deflate(X):
        return X - np.outer(np.ones(n), m_ones @ X) / total

    def factorize(sigma):
        lu = spla.splu((K - sigma * M).tocsc())
        return lu.solve

    w = 0.5 * (rho + np.roll(rho, -1)) * n

    def gram(X):
        D = np.roll(X, -1, axis=0) - X
        return D.T @ (w[:, None] * D)

    x = np.arange(n) / n
    X0 = np.column_stack([np.cos(2 * np.pi * x), np.sin(2 * np.pi * x),
                          np.cos(4 * np.pi * x), np.sin(4 * np.pi * x)])
    return _inverse_iteration(K, M, X0, factorize, deflate, tol=tol, gram=gram,
                              residual_tol=PENCIL_RESIDUAL_TOL)


def generator_gap(rho_star: Density, refine: int = 1, extrapolate: bool = False):
    """First nonzero eigenvalue of ``-rho^{-1}(rho phi')'`` and its eigenvector.

    ``refine > 1`` first Fourier-interpolates ``rho`` onto a grid ``refine``
    times finer. With ``extrapolate=True`` the eigenvalue on that grid is
    combined with the one on a grid twice as fine again,
    ``(4 l_2h - l_h) / 3`` in the usual notation, cancelling the ``h^2``
    term. Near-degenerate even/odd pairs need ``refine >= 4`` before the
    expansion becomes asymptotic at ``N = 256``.

    The eigenvector is returned on the input grid, normalized to
    ``int phi'^2 rho = 1`` and ``rho``-mean zero.
    """
    rho = rho_star.values
    if rho.min() <= 0.0:
        raise ValueError("generator gap needs a strictly positive density")
    n = rho.shape[0]
    fine_rho = fourier_interpolate(rho, refine) if refine > 1 else rho
    fine = _generator_raw(fine_rho)
    lam = fine.value
    if extrapolate:
        finer = _generator_raw(fourier_interpolate(rho, 2 * refine))
        lam = (4.0 * finer.value - fine.value) / 3.0
    vec = fine.vector[::refine] if refine > 1 else fine.vector
    phi = _normalize_direction(vec, rho)
    return lam, GridFunction(rho_star.grid, phi)


def generator_dense_oracle(rho_star: Density) -> np.ndarray:
    """All eigenvalues of the finite-difference pencil via a dense solver (small N only)."""
    K, M = dirichlet_pencil(rho_star.values)
    return sla.eigh(K.toarray(), M.toarray(), eigvals_only=True)


def _normalize_direction(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    n = rho.shape[0]
    phi = phi - np.sum(phi * rho) / np.sum(rho)
    d1 = diff_values(phi, 1)
    norm = np.sqrt(np.sum(d1**2 * rho) / n)
    phi = phi / norm
    # fix the sign so results are reproducible
    i = int(np.argmax(np.abs(phi)))
    return phi if phi[i] > 0 else -phi


def fourier_basis(n: int):
    """Real Fourier basis ``cos, sin (2 pi k x)`` for ``0 < k < n/2`` and its derivatives.

    Returns ``(P, D1, D2)``, each of shape ``(n, n-2)``: the basis sampled on
    the grid and its first and second derivatives.
    """
    x = np.arange(n) / n
    k = np.arange(1, n // 2)
    arg = 2 * np.pi * np.outer(x, k)
    w = 2 * np.pi * k
    c, s = np.cos(arg), np.sin(arg)
    P = np.hstack([c, s])
    D1 = np.hstack([-w * s, w * c])
    D2 = np.hstack([-(w**2) * c, -(w**2) * s])
    return P, D1, D2


def rayleigh_forms(rho: np.ndarray, v2: np.ndarray):
    """Quadratic forms ``A = int (phi''^2 + V'' phi'^2) rho`` and ``B = int phi'^2 rho``."""
    n = rho.shape[0]
    _, D1, D2 = fourier_basis(n)
    w = rho / n
    A = D2.T @ (w[:, None] * D2) + D1.T @ ((w * v2)[:, None] * D1)
    B = D1.T @ (w[:, None] * D1)
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    return A, B


def rayleigh_gap(rho_star: Density, V_star: GridFunction, gibbs_tol: float = 1e-8):
    """Minimum of the fourth-order Rayleigh quotient over mean-zero directions.

    Raises :class:`GibbsMismatch` unless ``rho_star`` equals ``gibbs(-V_star)``
    to within ``gibbs_tol`` (the quotient's link to the generator needs it).
    """
    mismatch = float(np.abs(rho_star.values - gibbs(-V_star).values).max())
    if mismatch > gibbs_tol:
        raise GibbsMismatch(f"|rho - gibbs(-V)|_inf = {mismatch:.3e} > {gibbs_tol:g}")
    rho = rho_star.values
    n = rho.shape[0]
    v2 = diff_values(V_star.values, 2)
    A, B = rayleigh_forms(rho, v2)
    P, D1, D2 = fourier_basis(n)

    w = rho / n

    def gram(C):
        d1, d2 = D1 @ C, D2 @ C
        return d2.T @ (w[:, None] * d2) + d1.T @ ((w * v2)[:, None] * d1)

    def factorize(sigma):
        lu = sla.lu_factor(A - sigma * B, check_finite=False)
        return lambda b: sla.lu_solve(lu, b, check_finite=False)

    X0 = np.zeros((n - 2, 4))
    m = n // 2 - 1
    X0[[0, m, 1, m + 1], [0, 1, 2, 3]] = 1.0
    res = _inverse_iteration(A, B, X0, factorize, lambda v: v.copy(), gram=gram)
    phi = _normalize_direction(P @ res.vector, rho)
    return res.value, GridFunction(rho_star.grid, phi)


def rayleigh_quotient(rho_star: Density, V_star: GridFunction, phi: GridFunction) -> float:
    """Evaluate the fourth-order quotient at a given direction (spectral derivatives)."""
    rho = rho_star.values
    d1 = diff_values(phi.values, 1)
    d2 = diff_values(phi.values, 2)
    v2 = diff_values(V_star.values, 2)
    return float(np.sum((d2**2 + v2 * d1**2) * rho) / np.sum(d1**2 * rho))


def eigen_residual(rho_star: Density, lam: float, phi: GridFunction) -> float:
    """Relative residual ``||K phi - lam M phi|| / ||lam M phi||`` of the pencil, in the ``M^{-1}`` norm."""
    rho = rho_star.values
    K, M = dirichlet_pencil(rho)
    m = M.diagonal()
    mphi = m * phi.values
    r = K @ phi.values - lam * mphi
    return float(np.sqrt(np.sum(r**2 / m)) / (abs(lam) * np.sqrt(np.sum(mphi**2 / m))))


@dataclass(frozen=True)
class SpectralResult:
    lambda_x: float
    lambda_y: float
    lambda_x_rayleigh: float
    lambda_y_rayleigh: float
    holley_stroock_bound: float
    eigenfunction_x: GridFunction = field(repr=False)
    eigenfunction_y: GridFunction = field(repr=False)

    @property
    def lambda_gap(self) -> float:
        return min(self.lambda_x, self.lambda_y)

    def to_dict(self) -> dict:
        return {
            "lambda_gap": self.lambda_gap,
            "lambda_x": self.lambda_x,
            "lambda_y": self.lambda_y,
            "lambda_x_rayleigh": self.lambda_x_rayleigh,
            "lambda_y_rayleigh": self.lambda_y_rayleigh,
            "holley_stroock_bound": self.holley_stroock_bound,
            "eigenfunction_x": self.eigenfunction_x.values.tolist(),
            "eigenfunction_y": self.eigenfunction_y.values.tolist(),
        }


def spectral_gap(eq: EquilibriumPair, f: Payoff) -> SpectralResult:
    """Per-player gaps by both routes plus the Holley-Stroock lower bound.

    The maximizing player's equilibrium is ``nu* ~ exp(+U)``, so its
    confining potential is ``-U``.
    """
    lx, _ = generator_gap(eq.mu_star, refine=GAP_REFINE, extrapolate=True)
    ly, _ = generator_gap(eq.nu_star, refine=GAP_REFINE, extrapolate=True)
    lxr, phi_x = rayleigh_gap(eq.mu_star, eq.V_star)
    lyr, phi_y = rayleigh_gap(eq.nu_star, -eq.U_star)
    hs = FOUR_PI2 * np.exp(-sup_norm(f))
    log.debug("gaps: x %.10g/%.10g  y %.10g/%.10g  HS %.6g", lx, lxr, ly, lyr, hs)
    return SpectralResult(lx, ly, lxr, lyr, float(hs), phi_x, phi_y)
