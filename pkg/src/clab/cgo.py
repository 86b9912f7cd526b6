"""Exponentially growing solutions ``v = e^{rho.x}(1 + psi)``.

The corrector solves ``(I + G_rho M_q) psi = -G_rho q`` on the torus, where
``M_q`` is multiplication by ``q``.  Everything stays in the conjugated
variable ``psi``; ``e^{rho.x}`` is only formed on the boundary of the cube.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import linalg as spla

from .faddeev import (
    DEFAULT_EPS_CHAR,
    ComplexFrequency,
    FaddeevOperator,
    loglog_slope,
    make_frequency_pair,
)
from .grid import BoundaryMesh, CauchyPair, GridSpec, ScalarField, boundary_values

log = logging.getLogger(__name__)

CGO_SHIFT = "auto"
OVERFLOW_EXPONENT = 700.0


class SolverError(RuntimeError):
    """Iterative solve failed; carries the contraction estimate."""

    def __init__(self, msg: str, kappa_hat: float | None = None):
        super().__init__(msg)
        self.kappa_hat = kappa_hat


@dataclass(eq=False)
class CgoSolution:
    rho: ComplexFrequency
    psi: ScalarField
    iterations: int
    residual: float
    kappa_hat: float
    char_count: int = 0
    shift: object = CGO_SHIFT
    seconds: float = 0.0


def _check_resolution(grid: GridSpec, rho: ComplexFrequency) -> None:
    # The corrector symbol ~ 1/(|zeta| |rho|) must see the characteristic
    # circle of radius sqrt(2)|rho| inside the band.
    if math.sqrt(2) * rho.abs >= grid.zeta_max:
        raise SolverError(
            f"|rho|={rho.abs:.3g} not resolved: sqrt(2)|rho| >= pi/h = {grid.zeta_max:.3g}"
        )


def contraction_estimate(op: FaddeevOperator, q: np.ndarray, iters: int = 20, seed: int = 0) -> float:
    """Power-iteration estimate of ``||G_rho M_q||_{2->2}``."""
    if not np.any(q):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(q.shape) + 1j * rng.standard_normal(q.shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op(q * x)
        z = q * op.adjoint(y)
        lam_new = np.linalg.norm(z)
        if lam_new == 0:
            return 0.0
        x = z / lam_new
        if abs(lam_new - lam) <= 1e-4 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return float(math.sqrt(lam))


def solve_corrector(
    q: ScalarField,
    rho: ComplexFrequency,
    tol: float = 1e-10,
    max_iter: int = 200,
    method: str = "gmres",
    shift: float | None = CGO_SHIFT,
    eps_char: float = DEFAULT_EPS_CHAR,
    estimate_kappa: bool = True,
) -> CgoSolution:
    """Solve ``(I + G_rho M_q) psi = -G_rho q``.

    Parameters
    ----------
    method
        ``"gmres"`` (default) or ``"fixed"`` for the plain iteration
        ``u -> -G_rho(q (1 + u))``, which converges when ``||G_rho M_q|| < 1``.
    shift
        Bloch shift of the lattice in units of ``pi/L``; see
        :class:`clab.grid.BlochTwist`.
    """
    t0 = time.perf_counter()
    grid = q.grid
    if np.any(q.values.imag != 0):
        raise ValueError("q must be real")
    _check_resolution(grid, rho)
    op = FaddeevOperator(grid, rho, eps_char, shift)
    qv = q.values.real
    if not np.any(qv):
        return CgoSolution(rho, ScalarField(grid, np.zeros(grid.shape)), 0, 0.0, 0.0, op.char_count, op.shift)
    kappa = contraction_estimate(op, qv) if estimate_kappa else float("nan")
    rhs = -op(qv.astype(complex))
    bnorm = np.linalg.norm(rhs)
    shape = grid.shape

    def apply(x):
        x = x.reshape(shape)
        return (x + op(qv * x)).ravel()

    if method == "gmres":
        A = spla.LinearOperator((rhs.size, rhs.size), matvec=apply, dtype=complex)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(
            A, rhs.ravel(), rtol=tol, atol=0.0, restart=min(60, max_iter), maxiter=max(1, max_iter // 60 + 1),
            callback=cb, callback_type="pr_norm",
        )
        its = count[0]
        psi = x.reshape(shape)
    elif method == "fixed":
        psi = np.zeros(shape, dtype=complex)
        its = 0
        for its in range(1, max_iter + 1):
            new = rhs - op(qv * psi)
            step = np.linalg.norm(new - psi)
            psi = new
            if step <= tol * bnorm:
                break
    else:
        raise ValueError(f"unknown method {method!r}")
    res = float(np.linalg.norm(apply(psi).reshape(shape) - rhs) / bnorm)
    if res > max(tol, 1e-14) * 10 or its >= max_iter:
        raise SolverError(
            f"corrector solve did not converge in {max_iter} iterations (residual {res:.2e}, "
            f"kappa_hat={kappa:.3g}); |rho| not large enough" if kappa >= 1 else
            f"corrector solve did not converge (residual {res:.2e}, kappa_hat={kappa:.3g})",
            kappa,
        )
    return CgoSolution(rho, ScalarField(grid, psi), its, res, kappa, op.char_count, op.shift, time.perf_counter() - t0)


def dense_corrector(q: ScalarField, rho: ComplexFrequency, shift: float | None = CGO_SHIFT, eps_char=DEFAULT_EPS_CHAR) -> np.ndarray:
    """Dense direct solve of the discrete corrector system (oracle, small grids only).

    The matrix of ``G_rho`` is assembled column by column from unit vectors.
    """
    grid = q.grid
    nn = grid.N**grid.n
    if nn > 8192:
        raise ValueError("dense oracle limited to at most 8192 unknowns")
    op = FaddeevOperator(grid, rho, eps_char, shift)
    G = np.empty((nn, nn), dtype=complex)
    e = np.zeros(nn, dtype=complex)
    for j in range(nn):
        e[j] = 1.0
        G[:, j] = op(e.reshape(grid.shape)).ravel()
        e[j] = 0.0
    qv = q.values.real.ravel()
    A = G * qv[None, :]
    A[np.diag_indices(nn)] += 1.0
    return np.linalg.solve(A, -G @ qv).reshape(grid.shape)


# --------------------------------------------------------------------------
# the field v on the boundary


@dataclass(eq=False)
class CgoField:
    """``v = e^{rho.x}(1 + psi)`` restricted to the cube and its Cauchy pair."""

    solution: CgoSolution
    mesh: BoundaryMesh
    trace: CauchyPair

    def values_in(self, mask: np.ndarray) -> np.ndarray:
        g = self.mesh.grid
        x = g.coords()
        ex = sum(r * xi[mask] for r, xi in zip(self.solution.rho.vector, x))
        return np.exp(ex) * (1 + self.solution.psi.values[mask])


def _check_growth(rho: ComplexFrequency, points: np.ndarray) -> None:
    m = float(np.max(np.abs(points @ rho.re)))
    if m > OVERFLOW_EXPONENT:
        raise SolverError(f"|Re rho . x| = {m:.1f} > {OVERFLOW_EXPONENT} on the boundary (unresolvable growth)")


def check_grid_resolution(grid: GridSpec, rho: ComplexFrequency) -> None:
    """``|rho| <= pi N / (8 L)``: at least eight nodes per e-fold of ``e^{rho.x}``."""
    lim = math.pi * grid.N / (8 * grid.L)
    if rho.abs > lim * (1 + 1e-12):
        raise SolverError(f"|rho|={rho.abs:.3g} exceeds the grid bound pi N/(8L) = {lim:.3g}")


def cgo_field(sol: CgoSolution, mesh: BoundaryMesh) -> CgoField:
    """Cauchy pair of ``v`` on ``mesh``.

    The trace is ``e^{rho.x}(1 + psi)`` at the boundary nodes.  The normal
    derivative uses the product rule
    ``d_n v = e^{rho.x}((rho.n)(1 + psi) + d_n psi)`` with the spectral
    gradient of ``psi``, avoiding a one-sided difference of the exponential.
    """
    grid = mesh.grid
    rho = sol.rho
    check_grid_resolution(grid, rho)
    _check_growth(rho, mesh.points)
    psi = sol.psi.values
    e = np.exp(mesh.points @ rho.vector)
    pb = boundary_values(mesh, psi)
    if np.any(psi):
        op = FaddeevOperator(grid, rho, shift=sol.shift)
        grads = op.gradient(psi)
        dpsi = sum(mesh.normals[:, d] * boundary_values(mesh, grads[d]) for d in range(grid.n))
    else:
        dpsi = 0.0
    rn = mesh.normals @ rho.vector
    trace = CauchyPair(mesh, e * (1 + pb), e * (rn * (1 + pb) + dpsi), rho.vector)
    return CgoField(sol, mesh, trace)


def plane_wave_pair(mesh: BoundaryMesh, rho: ComplexFrequency) -> CauchyPair:
    """Cauchy pair of ``e^{rho.x}`` on ``mesh``."""
    _check_growth(rho, mesh.points)
    e = np.exp(mesh.points @ rho.vector)
    return CauchyPair(mesh, e, (mesh.normals @ rho.vector) * e, rho.vector)


def interior_residual(sol: CgoSolution, q: ScalarField, a: float, stencil: str = "spectral") -> float:
    """Relative residual of ``(Delta + q) v = 0`` over interior nodes of ``[-a, a]^n``.

    ``stencil="spectral"`` evaluates ``e^{-rho.x}(Delta + q)v = Delta_rho psi + q(1 + psi)``
    with the same spectral ``Delta_rho`` the corrector was solved with, so the
    value reflects the solver tolerance.  ``stencil="fd"`` applies the
    second-order finite-difference Laplacian to ``v`` itself and measures
    discretization error as well.
    """
    g = q.grid
    x = g.coords()
    core = np.all([np.abs(xi) <= a - g.h + 1e-12 for xi in x], axis=0)
    psi = sol.psi.values
    qv = q.values.real
    if stencil == "spectral":
        op = FaddeevOperator(g, sol.rho, shift=sol.shift)
        r = op.apply_conjugated_laplacian(psi) + qv * (1 + psi)
        return float(np.linalg.norm(r[core]) / np.linalg.norm((qv * (1 + psi))[core]))
    inside = np.all([np.abs(xi) <= a + 1e-12 for xi in x], axis=0)
    ex = np.where(inside, sum(r * xi for r, xi in zip(sol.rho.vector, x)), -np.inf)
    v = np.exp(ex) * (1 + psi)
    lap = -2 * g.n * v
    for d in range(g.n):
        lap = lap + np.roll(v, 1, d) + np.roll(v, -1, d)
    lap /= g.h**2
    prod = qv * v
    return float(np.linalg.norm((lap + prod)[core]) / np.linalg.norm(prod[core]))


# --------------------------------------------------------------------------
# studies


@dataclass
class DecayRow:
    beta: float
    rho_abs: float
    psi_l2: float
    psi_lp: float
    kappa_hat: float
    iters: int
    remainder_abs: float = float("nan")
    error: str = ""


def corrector_decay_study(
    q: ScalarField,
    xi,
    betas,
    p: float = 4.0,
    tol: float = 1e-10,
    shift: float | None = CGO_SHIFT,
):
    """``||psi||_2`` and ``||psi||_p`` over a beta schedule; returns rows and fitted slope."""
    if len(betas) < 3:
        raise ValueError("need at least three beta values")
    rows = []
    for beta in betas:
        pair = make_frequency_pair(xi, beta)
        try:
            sol = solve_corrector(q, pair.rho1, tol=tol, shift=shift)
            rows.append(DecayRow(beta, pair.rho1.abs, sol.psi.norm(2), sol.psi.norm(p), sol.kappa_hat, sol.iterations))
        except SolverError as exc:
            rows.append(DecayRow(beta, pair.rho1.abs, math.nan, math.nan, exc.kappa_hat or math.nan, -1, error=str(exc)))
    ok = [r for r in rows if not r.error and r.psi_l2 > 0]
    slope = loglog_slope([r.rho_abs for r in ok], [r.psi_l2 for r in ok]) if len(ok) >= 2 else math.nan
    return rows, slope


def grid_fourier(q: ScalarField, xi) -> complex:
    """``sum_x q(x) e^{-i xi.x} h^n``."""
    x = q.grid.coords()
    ph = np.exp(-1j * sum(k * xk for k, xk in zip(xi, x)))
    return complex(np.sum(q.values * ph) * q.grid.cell_volume)


@dataclass
class IdentityRow:
    beta: float
    rho_abs: float
    remainder: complex
    pairing: complex
    qhat_diff: complex
    discrepancy: float
    kappa1: float
    kappa2: float


def identity_check(q1: ScalarField, q2: ScalarField, xi, betas, tol: float = 1e-10, shift: float | None = CGO_SHIFT):
    """Remainder ``R(rho) = int e^{-i xi x}(q1 - q2)(psi1 + psi2 + psi1 psi2)``.

    ``psi1`` solves the corrector for ``(q1, rho1)`` and ``psi2`` for
    ``(q2, rho2)``.  The pairing ``int (q1 - q2) v1 w2`` equals
    ``(q1^ - q2^)(xi) + R``; ``discrepancy = |pairing|``.
    """
    xi = np.asarray(xi, float)
    diff = q1.values.real - q2.values.real
    x = q1.grid.coords()
    ph = np.exp(-1j * sum(k * xk for k, xk in zip(xi, x)))
    dq = grid_fourier(ScalarField(q1.grid, diff), xi)
    rows = []
    for beta in betas:
        pair = make_frequency_pair(xi, beta)
        if not np.any(diff):
            rows.append(IdentityRow(beta, pair.rho1.abs, 0j, 0j, 0j, 0.0, 0.0, 0.0))
            continue
        s1 = solve_corrector(q1, pair.rho1, tol=tol, shift=shift)
        s2 = solve_corrector(q2, pair.rho2, tol=tol, shift=shift)
        p1, p2 = s1.psi.values, s2.psi.values
        R = complex(np.sum(ph * diff * (p1 + p2 + p1 * p2)) * q1.grid.cell_volume)
        pairing = dq + R
        rows.append(IdentityRow(beta, pair.rho1.abs, R, pairing, dq, abs(pairing), s1.kappa_hat, s2.kappa_hat))
    return rows
