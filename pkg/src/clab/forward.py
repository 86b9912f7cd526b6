"""Finite-difference Dirichlet problems, DtN matrices and Cauchy subspaces.

The operator ``Delta_h + q + E`` uses the standard ``2n + 1`` point stencil on
the nodes of the cube ``[-a, a]^n``; boundary nodes carry the Dirichlet data.
Boundary data given per face (edges duplicated) are averaged over the faces
meeting at an edge before they are imposed.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from .grid import BoundaryMesh, CauchyPair, GridSpec, ScalarField, normal_derivative

log = logging.getLogger(__name__)

COND_LIMIT = 1e8


class ForwardError(RuntimeError):
    pass


class NearEigenvalueError(ForwardError):
    """The Dirichlet system is numerically singular (``E`` close to an eigenvalue)."""

    def __init__(self, estimate: float, where: str = ""):
        msg = f"near Dirichlet eigenvalue: condition estimate {estimate:.3e}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)
        self.estimate = estimate


@dataclass(eq=False)
class DirichletSolve:
    u: np.ndarray  # full-grid array, zero outside the closed cube
    datum: np.ndarray  # boundary datum (nodal on the mesh)
    iterations: int
    residual: float
    condition: float


def _as_array(q, grid: GridSpec) -> np.ndarray:
    if q is None:
        return np.zeros(grid.shape)
    if isinstance(q, ScalarField):
        if np.any(q.values.imag):
            raise ForwardError("q must be real")
        return q.values.real
    q = np.asarray(q, dtype=float)
    return np.broadcast_to(q, grid.shape)


class DirichletProblem:
    """Assembled and factorised ``(Delta_h + q + E) u = 0`` on the cube.

    Parameters
    ----------
    mesh
        Boundary mesh; it fixes the grid and the cube.
    q
        Potential on the full grid (only cube nodes are read).
    E
        Energy shift.
    method
        ``"direct"`` (sparse LU, default) or ``"iterative"`` (BiCGSTAB with a
        Jacobi preconditioner).
    """

    def __init__(self, mesh: BoundaryMesh, q=None, E: float = 0.0, method: str = "direct", tol: float = 1e-12, check: bool = True):
        self.mesh = mesh
        self.grid = g = mesh.grid
        self.E = float(E)
        self.method = method
        self.tol = tol
        n, m, c = g.n, mesh.m, g.N // 2
        lo, hi = c - m, c + m
        self.lo, self.hi = lo, hi
        side = 2 * m + 1
        self.q = _as_array(q, g)
        # interior unknowns
        inner = np.arange(lo + 1, hi)
        self.inner_shape = (inner.size,) * n
        sl = tuple(slice(lo + 1, hi) for _ in range(n))
        self.inner_slice = sl
        ni = inner.size
        h2 = 1.0 / g.h**2
        I1 = sp.identity(ni, format="csr")
        D1 = sp.diags([np.ones(ni - 1), -2 * np.ones(ni), np.ones(ni - 1)], [-1, 0, 1], format="csr") * h2
        A = None
        for d in range(n):
            term = None
            for e in range(n):
                f = D1 if e == d else I1
                term = f if term is None else sp.kron(term, f, format="csr")
            A = term if A is None else A + term
        diag = (self.q[sl] + self.E).ravel()
        self.A = (A + sp.diags(diag)).tocsc()
        self._side = side
        if method == "direct":
            self._lu = spla.splu(self.A)
        elif method != "iterative":
            raise ForwardError(f"unknown method {method!r}")
        self.condition = self._condition() if check else float("nan")
        if check and self.condition > COND_LIMIT:
            raise NearEigenvalueError(self.condition)

    # -- linear algebra --------------------------------------------------------
    def _solve(self, rhs: np.ndarray) -> tuple[np.ndarray, int]:
        if self.method == "direct":
            return self._lu.solve(rhs), 1
        d = self.A.diagonal()
        M = spla.LinearOperator(self.A.shape, matvec=lambda x: x / d, dtype=self.A.dtype)
        its = [0]

        def cb(_):
            its[0] += 1

        x, info = spla.bicgstab(self.A, rhs, rtol=self.tol, atol=0.0, M=M, maxiter=20000, callback=cb)
        if info != 0:
            raise ForwardError(f"iterative Dirichlet solve failed (info={info})")
        return x, its[0]

    def _condition(self) -> float:
        n = self.A.shape[0]
        if self.method == "direct":
            inv = spla.LinearOperator((n, n), matvec=self._lu.solve, rmatvec=lambda x: self._lu.solve(x, trans="T"), dtype=float)
        else:
            lu = spla.splu(self.A)
            inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"), dtype=float)
        return float(spla.onenormest(self.A) * spla.onenormest(inv))

    # -- boundary handling -----------------------------------------------------
    @cached_property
    def _boundary_average(self):
        """Sparse map from mesh nodal values to values at distinct boundary grid nodes."""
        flat = self.mesh.flat_index()
        uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
        P = sp.csr_matrix((1.0 / counts[inv], (inv, np.arange(flat.size))), shape=(uniq.size, flat.size))
        return uniq, P

    def boundary_grid(self, datum: np.ndarray) -> np.ndarray:
        """Full-grid array holding the (edge-averaged) datum on boundary nodes."""
        uniq, P = self._boundary_average
        u = np.zeros(self.grid.N**self.grid.n, dtype=np.result_type(datum, float))
        u[uniq] = P @ datum
        return u.reshape(self.grid.shape)

    def solve(self, datum: np.ndarray) -> DirichletSolve:
        """Solve with nodal boundary datum ``datum`` (length ``mesh.size``)."""
        datum = np.asarray(datum)
        ub = self.boundary_grid(datum)
        # move boundary contributions to the right-hand side
        h2 = 1.0 / self.grid.h**2
        rhs = np.zeros(self.inner_shape, dtype=ub.dtype)
        sl = self.inner_slice
        for d in range(self.grid.n):
            for s in (-1, 1):
                shifted = np.roll(ub, -s, axis=d)
                rhs -= shifted[sl] * h2
        # only boundary nodes are nonzero in ub, so interior neighbours add nothing
        b = rhs.ravel()
        if np.iscomplexobj(b):
            xr, it1 = self._solve(b.real.copy())
            xi, it2 = self._solve(b.imag.copy())
            x, its = xr + 1j * xi, it1 + it2
        else:
            x, its = self._solve(b)
        u = ub.copy()
        u[sl] = x.reshape(self.inner_shape)
        r = self.A @ x - b
        res = float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))
        return DirichletSolve(u, datum, its, res, self.condition)

    def cauchy_pair(self, sol: DirichletSolve) -> CauchyPair:
        return CauchyPair(self.mesh, sol.datum, normal_derivative(self.mesh, sol.u))

    def residual_field(self, u: np.ndarray) -> np.ndarray:
        """``(Delta_h + q + E) u`` on interior nodes."""
        g = self.grid
        lap = -2 * g.n * u
        for d in range(g.n):
            lap = lap + np.roll(u, 1, d) + np.roll(u, -1, d)
        r = lap / g.h**2 + (self.q + self.E) * u
        return r[self.inner_slice]


def solve_dirichlet(mesh: BoundaryMesh, q, E: float, f, coefficients: bool = True, **kw) -> DirichletSolve:
    """One Dirichlet solve; ``f`` is a coefficient vector (or nodal data)."""
    prob = DirichletProblem(mesh, q, E, **kw)
    datum = mesh.synthesize(f) if coefficients else np.asarray(f)
    return prob.solve(datum)


def q_hash(q, grid: GridSpec, E: float = 0.0) -> str:
    arr = np.ascontiguousarray(_as_array(q, grid), dtype="<f8")
    h = hashlib.sha256(arr.tobytes())
    h.update(json.dumps([grid.n, grid.L, grid.N, E]).encode())
    return h.hexdigest()[:16]


@dataclass(eq=False)
class CauchySubspace:
    """Columns ``[I; Lambda]`` (Dirichlet block on top) in basis coefficients."""

    C: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.C.shape[1]

    @property
    def dtn(self) -> np.ndarray:
        return self.C[self.M :]

    def graph_residual(self, pair_coeffs: np.ndarray) -> float:
        """``||psi - Lambda phi|| / ||(phi, psi)||`` for a coefficient pair."""
        M = self.M
        phi, psi = pair_coeffs[:M], pair_coeffs[M:]
        return float(np.linalg.norm(psi - self.dtn @ phi) / np.linalg.norm(pair_coeffs))


def green_weights(mesh: BoundaryMesh) -> np.ndarray:
    """Pairing weights of the discrete Green identity: ``h^(n-1)`` on face interiors, 0 on rims."""
    g = mesh.grid
    I = mesh.index
    lo, hi = g.N // 2 - mesh.m, g.N // 2 + mesh.m
    on_rim = np.sum((I == lo) | (I == hi), axis=1) > 1
    return np.where(on_rim, 0.0, g.h ** (g.n - 1))


def green_flux(mesh: BoundaryMesh, u: np.ndarray) -> np.ndarray:
    """First-order outward flux ``(u_b - u_i)/h`` for which the 2n+1 point scheme obeys Green's identity.

    For discrete solutions ``u, v`` of the same real system,
    ``sum_b w_b (v_b F_b(u) - u_b F_b(v)) = 0`` exactly with
    :func:`green_weights`.  Zero on rim nodes (they carry no weight).
    """
    h = mesh.grid.h
    I = mesh.index
    out = np.zeros(mesh.size, dtype=np.result_type(u, float))
    w = green_weights(mesh)
    for face in mesh.faces:
        sl = slice(face.start, face.stop)
        i0 = I[sl]
        i1 = i0.copy()
        i1[:, face.axis] -= face.side
        out[sl] = (u[tuple(i0.T)] - u[tuple(i1.T)]) / h
    return np.where(w > 0, out, 0.0)


@dataclass(eq=False)
class Projection:
    """Weighted least-squares projection onto the boundary basis."""

    mesh: BoundaryMesh
    weights: np.ndarray

    @cached_property
    def gram(self) -> np.ndarray:
        B = self.mesh.basis
        return B.T @ (self.weights[:, None] * B)

    @cached_property
    def matrix(self) -> np.ndarray:
        B = self.mesh.basis
        return np.linalg.solve(self.gram, B.T * self.weights)

    def __call__(self, g: np.ndarray) -> np.ndarray:
        return self.matrix @ g


def flux_projection(mesh: BoundaryMesh, flux: str = "stencil") -> Projection:
    if flux == "stencil":
        return Projection(mesh, mesh.weights)
    if flux == "green":
        return Projection(mesh, green_weights(mesh))
    raise ForwardError(f"unknown flux {flux!r} (valid: stencil, green)")


def dtn_matrix(mesh: BoundaryMesh, q=None, E: float = 0.0, flux: str = "stencil", **kw) -> np.ndarray:
    """DtN matrix: column ``j`` holds the projected normal trace of the solve with datum ``b_j``.

    ``flux="stencil"`` (default) uses the second-order one-sided difference
    and the Simpson boundary quadrature.  ``flux="green"`` uses the
    first-order flux of :func:`green_flux` with :func:`green_weights`; then
    ``G Lambda`` is exactly symmetric for real ``q`` (``G`` the Gram matrix
    of that pairing), at the price of first-order accuracy.
    """
    try:
        prob = DirichletProblem(mesh, q, E, **kw)
    except NearEigenvalueError as exc:
        raise NearEigenvalueError(exc.estimate, f"E={E}") from None
    B = mesh.basis
    proj = flux_projection(mesh, flux)
    deriv = normal_derivative if flux == "stencil" else green_flux
    Lam = np.empty((mesh.basis_size, mesh.basis_size))
    for j in range(mesh.basis_size):
        sol = prob.solve(B[:, j])
        Lam[:, j] = proj(deriv(mesh, sol.u))
    return Lam


def symmetry_defect(mesh: BoundaryMesh, Lam: np.ndarray, flux: str = "stencil") -> float:
    """``||G Lam - (G Lam)^T|| / ||G Lam||`` with ``G`` the Gram matrix of the flux pairing."""
    S = flux_projection(mesh, flux).gram @ Lam
    return float(np.linalg.norm(S - S.T) / np.linalg.norm(S))


def cauchy_subspace(mesh: BoundaryMesh, q=None, E: float = 0.0, **kw) -> CauchySubspace:
    Lam = dtn_matrix(mesh, q, E, **kw)
    C = np.vstack([np.eye(mesh.basis_size), Lam])
    meta = {
        "q_hash": q_hash(q, mesh.grid, E),
        "E": E,
        "grid": [mesh.grid.n, mesh.grid.L, mesh.grid.N],
        "a": mesh.domain.a,
        "degree": mesh.degree,
        "basis": mesh.basis_kind,
    }
    return CauchySubspace(C, meta)


def boundary_inner(mesh: BoundaryMesh, a: np.ndarray, b: np.ndarray) -> float:
    """``<a, b>_{dOmega}`` for coefficient vectors (Gram-weighted)."""
    return float(a @ mesh.gram() @ b)


def convergence_order(errors, hs) -> float:
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
