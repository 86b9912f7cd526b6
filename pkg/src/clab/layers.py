"""Layer potentials on the cube boundary and the Calderón projector ``A_0``.

This is the validation path of the reconstruction module.  The Green
function ``G = G_0 + R`` of the Laplacian with the Faddeev growth condition
(periodised with the same Bloch twist as the CGO solver) is split into the
free-space part ``G_0 = -1/(4 pi r)`` and a smooth remainder ``R``.  The
remainder is computed spectrally after subtracting a cut-off copy of the
singularity, and the free-space part is integrated on edge-graded Gauss
panels with analytic rectangle integrals removing the singular behaviour.

Conventions
-----------
Layer operators use ``Phi = -G`` (so ``-Delta Phi = delta``) with the field at
target ``y`` of a source at ``x`` equal to ``Phi(y - x)``.  Pairs are ordered
(Dirichlet, Neumann) on both input and output, and

``-A_0 = [[1/2 - K, V], [W, 1/2 + K']]``

is the interior projector: it fixes interior Cauchy data and annihilates
exterior data with the same growth as the point-source fields used by
:func:`clab.calderon.sample_kernel_basis`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import ndimage

from .faddeev import ComplexFrequency, FaddeevOperator, resolve_shift
from .grid import BoundaryMesh, GridSpec

FOUR_PI = 4.0 * math.pi


class LayerError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# cut-off and smooth remainder


def _smoothstep_poly(order: int = 5) -> np.polynomial.Polynomial:
    """Polynomial ``S`` on ``[0, 1]`` with ``S(0)=0``, ``S(1)=1`` and ``order`` flat derivatives at both ends."""
    n = order
    coef = np.zeros(2 * n + 2)
    for k in range(n + 1):
        coef[n + 1 + k] = math.comb(n + k, k) * math.comb(2 * n + 1, n - k) * (-1) ** k
    return np.polynomial.Polynomial(coef)


@dataclass(frozen=True)
class Cutoff:
    """Radial cut-off ``chi`` equal to 1 below ``r1`` and 0 above ``r2``."""

    r1: float = 0.12
    r2: float = 0.45
    order: int = 5

    def __call__(self, r: np.ndarray, nu: int = 0) -> np.ndarray:
        S = _smoothstep_poly(self.order)
        w = self.r2 - self.r1
        t = np.clip((np.asarray(r, float) - self.r1) / w, 0.0, 1.0)
        inside = (r > self.r1) & (r < self.r2)
        if nu == 0:
            base = 1.0 - S(t)
            return np.where(r <= self.r1, 1.0, np.where(r >= self.r2, 0.0, base))
        d = -S.deriv(nu)(t) / w**nu
        return np.where(inside, d, 0.0)


class SplitKernel:
    """``G = G_0 + R`` with ``R`` smooth, evaluated at arbitrary offsets.

    ``R = e^{rho.z} u + (chi - 1) G_0`` where ``u`` solves
    ``Delta_rho u = e^{-rho.z} chi''(r) / (4 pi r)`` on the Bloch torus.  The
    periodic parts of ``u``, its gradient and its Hessian are tabulated and
    interpolated with cubic splines.
    """

    def __init__(self, grid: GridSpec, rho: ComplexFrequency, shift=None, cutoff: Cutoff | None = None, eps_char: float | None = None):
        if grid.n != 3:
            raise LayerError("layer operators are implemented for three dimensions")
        self.grid = grid
        self.rho = rho
        self.cutoff = cutoff or Cutoff()
        if self.cutoff.r2 >= grid.L:
            raise LayerError("cut-off radius must stay inside the period cell")
        kw = {} if eps_char is None else {"eps_char": eps_char}
        op = FaddeevOperator(grid, rho, shift=resolve_shift(grid, rho, shift), **kw)
        self.shift = op.shift
        self.theta = op.twist.theta
        N, h = grid.N, grid.h
        k = np.fft.fftfreq(N, d=1.0 / N)  # integer offsets in FFT order
        Z = np.meshgrid(k * h, k * h, k * h, indexing="ij")
        r = np.sqrt(sum(zz**2 for zz in Z))
        rv = rho.vector
        with np.errstate(divide="ignore", invalid="ignore"):
            src = np.where(r > 0, self.cutoff(r, 2) / (FOUR_PI * np.where(r > 0, r, 1.0)), 0.0)
        F = np.exp(-sum(rv[d] * Z[d] for d in range(3))) * src
        F = F * np.exp(-1j * sum(self.theta[d] * Z[d] for d in range(3)))
        U = op.multiplier * np.fft.fftn(F)
        z = grid.zeta(self.theta)
        tabs = {"u": np.fft.ifftn(U)}
        for i in range(3):
            tabs[f"g{i}"] = np.fft.ifftn(1j * z[i] * U)
        for i in range(3):
            for j in range(i, 3):
                tabs[f"h{i}{j}"] = np.fft.ifftn(-z[i] * z[j] * U)
        self._coef = {
            key: (
                ndimage.spline_filter(t.real, order=3, mode="grid-wrap"),
                ndimage.spline_filter(t.imag, order=3, mode="grid-wrap"),
            )
            for key, t in tabs.items()
        }

    def _interp(self, key: str, z: np.ndarray) -> np.ndarray:
        cr, ci = self._coef[key]
        coords = (z / self.grid.h).T
        re = ndimage.map_coordinates(cr, coords, order=3, mode="grid-wrap", prefilter=False)
        im = ndimage.map_coordinates(ci, coords, order=3, mode="grid-wrap", prefilter=False)
        return (re + 1j * im) * np.exp(1j * (z @ self.theta))

    def _check(self, z: np.ndarray) -> None:
        # the Bloch-periodic remainder is smooth until offsets approach the
        # image sources at distance 2L; off-boundary probes need a little past L
        if np.any(np.abs(z) > 1.25 * self.grid.L):
            raise LayerError("offset too far outside the period cell")

    def _radial(self, r: np.ndarray):
        """``phi = (1 - chi)/(4 pi r)`` and its first two radial derivatives."""
        c = self.cutoff
        chi, d1, d2 = c(r), c(r, 1), c(r, 2)
        rs = np.where(r > 0, r, 1.0)
        one = 1.0 - chi
        phi = one / (FOUR_PI * rs)
        dphi = (-d1 * rs - one) / (FOUR_PI * rs**2)
        ddphi = (-d2 * rs**2 + 2 * d1 * rs + 2 * one) / (FOUR_PI * rs**3)
        small = r <= c.r1
        return np.where(small, 0, phi), np.where(small, 0, dphi), np.where(small, 0, ddphi)

    def remainder(self, z: np.ndarray, derivs: int = 0) -> dict:
        """``R`` (key ``"R"``), its gradient ``"grad"`` (``derivs >= 1``) and Hessian ``"hess"`` (``derivs >= 2``)."""
        z = np.atleast_2d(np.asarray(z, float))
        self._check(z)
        rv = self.rho.vector
        e = np.exp(z @ rv)
        r = np.linalg.norm(z, axis=1)
        phi, dphi, ddphi = self._radial(r)
        u = self._interp("u", z)
        out = {"R": e * u + phi}
        if derivs >= 1:
            gu = np.stack([self._interp(f"g{i}", z) for i in range(3)], axis=1)
            rs = np.where(r > 0, r, 1.0)[:, None]
            zh = z / rs
            out["grad"] = e[:, None] * (gu + rv * u[:, None]) + dphi[:, None] * zh
            if derivs >= 2:
                H = np.empty((z.shape[0], 3, 3), dtype=complex)
                for i in range(3):
                    for j in range(i, 3):
                        H[:, i, j] = H[:, j, i] = self._interp(f"h{i}{j}", z)
                H = H + rv[None, :, None] * gu[:, None, :] + gu[:, :, None] * rv[None, None, :]
                H = H + np.multiply.outer(rv, rv)[None] * u[:, None, None]
                H = e[:, None, None] * H
                P = zh[:, :, None] * zh[:, None, :]
                I = np.eye(3)[None]
                H = H + ddphi[:, None, None] * P + (dphi / rs[:, 0])[:, None, None] * (I - P)
                out["hess"] = H
        return out

    def green(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full ``G`` and ``grad G`` at nonzero offsets."""
        z = np.atleast_2d(np.asarray(z, float))
        r = np.linalg.norm(z, axis=1)
        if np.any(r == 0):
            raise LayerError("G is singular at zero offset")
        rem = self.remainder(z, 1)
        g0 = -1.0 / (FOUR_PI * r)
        dg0 = z / (FOUR_PI * r[:, None] ** 3)
        return g0 + rem["R"], dg0 + rem["grad"]


# --------------------------------------------------------------------------
# analytic rectangle integrals (free-space kernel)


def _corner_sum(fn, u1, u2, v1, v2, *args):
    return fn(u2, v2, *args) - fn(u1, v2, *args) - fn(u2, v1, *args) + fn(u1, v1, *args)


def _safe_asinh_ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, np.arcsinh(num / np.where(den > 0, den, 1.0)), 0.0)


def _F_inv_r(u, v, w):
    aw = np.abs(w)
    R = np.sqrt(u * u + v * v + w * w)
    t1 = u * _safe_asinh_ratio(v, np.sqrt(u * u + w * w))
    t2 = v * _safe_asinh_ratio(u, np.sqrt(v * v + w * w))
    with np.errstate(divide="ignore", invalid="ignore"):
        t3 = np.where(aw > 0, aw * np.arctan(u * v / np.where(aw > 0, aw * R, 1.0)), 0.0)
    return t1 + t2 - t3


def _F_solid(u, v, w):
    aw = np.abs(w)
    R = np.sqrt(u * u + v * v + w * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(aw > 0, np.arctan(u * v / np.where(aw > 0, aw * R, 1.0)), 0.0)


def _F_u_R(u, v, w):  # d_u d_v F = u / R
    R = np.sqrt(u * u + v * v + w * w)
    rho2 = u * u + w * w
    return 0.5 * (v * R + rho2 * _safe_asinh_ratio(v, np.sqrt(rho2)))


def _F_u_R3(u, v, w):  # d_u d_v F = u / R^3
    return -_safe_asinh_ratio(v, np.sqrt(u * u + w * w))


def _F_u2_r3(u, v):  # d_u d_v F = u^2 / r^3 (coplanar)
    return v * _safe_asinh_ratio(u, np.abs(v))


def _F_v2_r3(u, v):
    return u * _safe_asinh_ratio(v, np.abs(u))


def _F_uv_r3(u, v):
    return -np.sqrt(u * u + v * v)


def _F_u_r(u, v):  # d_u d_v F = u / r
    r = np.sqrt(u * u + v * v)
    return 0.5 * (v * r + u * u * _safe_asinh_ratio(v, np.abs(u)))


def _F_v_r(u, v):
    r = np.sqrt(u * u + v * v)
    return 0.5 * (u * r + v * v * _safe_asinh_ratio(u, np.abs(v)))


def _F_u_r3(u, v):  # d_u d_v F = u / r^3
    return -_safe_asinh_ratio(v, np.abs(u))


def _F_v_r3(u, v):
    return -_safe_asinh_ratio(u, np.abs(v))


@dataclass(frozen=True)
class Panel:
    """Square face ``x_axis = side * a`` of the cube ``[-a, a]^3``."""

    axis: int
    side: int
    a: float

    @property
    def tangential(self) -> tuple[int, int]:
        return tuple(d for d in range(3) if d != self.axis)

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.side
        return n

    def local(self, y: np.ndarray):
        """Corner offsets ``(u1, u2, v1, v2)`` of the face relative to ``y`` and the signed height."""
        t1, t2 = self.tangential
        a = self.a
        return (-a - y[:, t1], a - y[:, t1], -a - y[:, t2], a - y[:, t2], self.side * y[:, self.axis] - a)

    def single(self, y: np.ndarray) -> np.ndarray:
        """``int_F 1/(4 pi |x - y|) dS_x``."""
        u1, u2, v1, v2, w = self.local(y)
        return _corner_sum(_F_inv_r, u1, u2, v1, v2, w) / FOUR_PI

    def double(self, y: np.ndarray) -> np.ndarray:
        """``int_F n_x.(y - x) / (4 pi |x - y|^3) dS_x`` (signed solid angle over ``4 pi``)."""
        u1, u2, v1, v2, w = self.local(y)
        return np.sign(w) * _corner_sum(_F_solid, u1, u2, v1, v2, w) / FOUR_PI

    def single_linear(self, y: np.ndarray, comp: int) -> np.ndarray:
        """``int_F x_t / (4 pi |x - y|) dS_x`` for tangential coordinate ``t = tangential[comp]``."""
        u1, u2, v1, v2, w = self.local(y)
        if comp == 0:
            mom = _corner_sum(_F_u_R, u1, u2, v1, v2, w)
        else:
            mom = _corner_sum(lambda u, v, ww: _F_u_R(v, u, ww), u1, u2, v1, v2, w)
        yt = y[:, self.tangential[comp]]
        return (mom + yt * _corner_sum(_F_inv_r, u1, u2, v1, v2, w)) / FOUR_PI

    def double_linear(self, y: np.ndarray, comp: int) -> np.ndarray:
        """``int_F n_x.(y - x) x_t / (4 pi |x - y|^3) dS_x``."""
        u1, u2, v1, v2, w = self.local(y)
        if comp == 0:
            mom = _corner_sum(_F_u_R3, u1, u2, v1, v2, w)
        else:
            mom = _corner_sum(lambda u, v, ww: _F_u_R3(v, u, ww), u1, u2, v1, v2, w)
        yt = y[:, self.tangential[comp]]
        return w * mom / FOUR_PI + yt * self.double(y)

    def _fd(self, fn, y: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
        d = np.broadcast_to(direction, y.shape)
        return (fn(y + step * d) - fn(y - step * d)) / (2 * step)

    def adjoint_double(self, y: np.ndarray, ny: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """``int_F n_y.(x - y) / (4 pi r^3) dS_x = n_y . grad_y single`` (``y`` off the face)."""
        return self._fd(self.single, y, ny, step * self.a)

    def hyper(self, y: np.ndarray, ny: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """``int_F n_y^T Hess Phi_0(y - x) n_x dS_x = -n_y . grad_y double`` (``y`` off the face)."""
        return -self._fd(self.double, y, ny, step * self.a)

    # coplanar moments for targets on the face itself
    def coplanar_moments(self, y: np.ndarray) -> dict:
        u1, u2, v1, v2, _ = self.local(y)
        cs = lambda fn: _corner_sum(fn, u1, u2, v1, v2)  # noqa: E731
        return {
            "r": cs(_F_u_r), "s": cs(_F_v_r),  # int (x-y)/r, components
            "r3u": cs(_F_u_r3), "r3v": cs(_F_v_r3),  # pv int (x-y)/r^3
            "uu": cs(_F_u2_r3), "vv": cs(_F_v2_r3), "uv": cs(_F_uv_r3),  # int (x-y)(x-y)^T / r^3
        }


# --------------------------------------------------------------------------
# quadrature and basis on faces


def graded_rule(a: float, panels: int = 6, levels: int = 2, order: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss rule on ``[-a, a]`` with the end panels split geometrically ``levels`` times."""
    br = list(np.linspace(-a, a, panels + 1))
    left, right = br[0], br[1]
    for _ in range(levels):
        right = left + (right - left) / 2
        br.insert(1, right)
    right, left = br[-1], br[-2]
    for _ in range(levels):
        left = right - (right - left) / 2
        br.insert(len(br) - 1, left)
    br = np.array(sorted(br))
    x0, w0 = legendre.leggauss(order)
    pts, wts = [], []
    for lo, hi in zip(br[:-1], br[1:]):
        pts.append(0.5 * (hi - lo) * x0 + 0.5 * (hi + lo))
        wts.append(0.5 * (hi - lo) * w0)
    return np.concatenate(pts), np.concatenate(wts)


@dataclass(eq=False)
class FaceQuadrature:
    """Tensor rule on every face of the cube with basis values and derivatives."""

    mesh: BoundaryMesh
    rule: tuple
    panels: list = field(init=False)
    points: list = field(init=False)
    weights: list = field(init=False)
    basis: list = field(init=False)  # per face: (values, d_t1, d_t2, d_t1t1, d_t2t2, d_t1t2)
    scales: list = field(init=False)

    def __post_init__(self):
        mesh = self.mesh
        a = mesh.domain.a
        s, w = self.rule
        S1, S2 = np.meshgrid(s, s, indexing="ij")
        W2 = np.outer(w, w).ravel()
        self.panels, self.points, self.weights, self.basis, self.scales = [], [], [], [], []
        scale = _basis_scales(mesh)
        nm = len(mesh._face_modes)
        for fi, face in enumerate(mesh.faces):
            p = Panel(face.axis, face.side, a)
            t1, t2 = p.tangential
            pts = np.zeros((S1.size, 3))
            pts[:, face.axis] = face.side * a
            pts[:, t1] = S1.ravel()
            pts[:, t2] = S2.ravel()
            self.panels.append(p)
            self.points.append(pts)
            self.weights.append(W2)
            self.scales.append(scale[fi * nm : (fi + 1) * nm])
            self.basis.append(_face_basis(mesh, pts[:, t1], pts[:, t2], self.scales[-1]))


def _legendre_derivs(t: np.ndarray, j: int, a: float):
    c = np.zeros(j + 1)
    c[j] = 1.0
    d1 = legendre.legder(c, 1) if j >= 1 else np.zeros(1)
    d2 = legendre.legder(c, 2) if j >= 2 else np.zeros(1)
    return legendre.legval(t, c), legendre.legval(t, d1) / a, legendre.legval(t, d2) / a**2


def _basis_scales(mesh: BoundaryMesh) -> np.ndarray:
    """Normalisation of each mesh basis column relative to the raw Legendre product."""
    B = mesh.basis
    out = np.empty(mesh.basis_size)
    nm = len(mesh._face_modes)
    a = mesh.domain.a
    for fi, face in enumerate(mesh.faces):
        sl = slice(face.start, face.stop)
        t1, t2 = [d for d in range(3) if d != face.axis]
        for mi, (j1, j2) in enumerate(mesh._face_modes):
            raw = _legendre_derivs(mesh.points[sl, t1] / a, j1, a)[0] * _legendre_derivs(mesh.points[sl, t2] / a, j2, a)[0]
            k = np.argmax(np.abs(raw))
            out[fi * nm + mi] = B[sl, fi * nm + mi][k] / raw[k]
    return out


def _face_basis(mesh: BoundaryMesh, s1: np.ndarray, s2: np.ndarray, scale: np.ndarray):
    a = mesh.domain.a
    modes = mesh._face_modes
    vals = np.empty((6, s1.size, len(modes)))
    for mi, (j1, j2) in enumerate(modes):
        p1, d1, dd1 = _legendre_derivs(s1 / a, j1, a)
        p2, d2, dd2 = _legendre_derivs(s2 / a, j2, a)
        c = scale[mi]
        vals[0, :, mi] = c * p1 * p2
        vals[1, :, mi] = c * d1 * p2
        vals[2, :, mi] = c * p1 * d2
        vals[3, :, mi] = c * dd1 * p2
        vals[4, :, mi] = c * p1 * dd2
        vals[5, :, mi] = c * d1 * d2
    return vals


def _edge_projection(target: Panel, source: Panel, y: np.ndarray) -> np.ndarray:
    """Tangential coordinates on ``source`` of the nearest point to ``y`` (clipped to the face)."""
    t1, t2 = source.tangential
    return np.clip(y[:, t1], -source.a, source.a), np.clip(y[:, t2], -source.a, source.a)


# --------------------------------------------------------------------------
# assembly


@dataclass(eq=False)
class LayerOperators:
    """Galerkin matrices in the boundary basis and the assembled ``A_0``.

    ``V, K, Kp, W`` are Galerkin matrices (``<b_i, Op b_j>``); ``gram`` is the
    basis Gram matrix; ``A0`` acts on stacked (Dirichlet, Neumann)
    coefficient vectors.
    """

    mesh: BoundaryMesh
    rho: ComplexFrequency
    V: np.ndarray
    K: np.ndarray
    Kp: np.ndarray
    W: np.ndarray
    gram: np.ndarray
    A0: np.ndarray
    flagged: int = 0
    seconds: float = 0.0
    kernel: "SplitKernel | None" = None

    @property
    def projector(self) -> np.ndarray:
        return -self.A0

    def projector_defect(self) -> float:
        """``||A0^2 + A0||_F / ||A0||_F`` (zero for an exact projector)."""
        A = self.A0
        return float(np.linalg.norm(A @ A + A) / np.linalg.norm(A))

    def range_basis(self, rank: int | None = None) -> np.ndarray:
        rank = self.mesh.basis_size if rank is None else rank
        U, _, _ = np.linalg.svd(self.A0)
        return U[:, :rank]

    def kernel_basis(self, rank: int | None = None) -> np.ndarray:
        rank = self.mesh.basis_size if rank is None else rank
        _, _, Vh = np.linalg.svd(self.A0)
        return Vh[-rank:].conj().T


def _free_space_blocks(fq: FaceQuadrature):
    """Galerkin matrices of ``V, K, K', W`` for ``Phi_0 = 1/(4 pi r)``."""
    nf = len(fq.panels)
    nm = fq.basis[0].shape[2]
    M = nf * nm
    V = np.zeros((M, M))
    K = np.zeros((M, M))
    Kp = np.zeros((M, M))
    W = np.zeros((M, M))
    # finite part of int_T k_W over the own face via W[1] = 0
    fp_self = []
    for ti, T in enumerate(fq.panels):
        y = fq.points[ti]
        nT = T.normal
        tot = np.zeros(y.shape[0])
        for fi, F in enumerate(fq.panels):
            if fi != ti:
                tot += F.hyper(y, nT)
        fp_self.append(-tot)
    for ti, T in enumerate(fq.panels):
        y, wy = fq.points[ti], fq.weights[ti]
        By = fq.basis[ti]
        nT = T.normal
        rows = slice(ti * nm, (ti + 1) * nm)
        test = (wy[:, None] * By[0]).T  # (nm, ny)
        for fi, F in enumerate(fq.panels):
            x, wx = fq.points[fi], fq.weights[fi]
            Bx = fq.basis[fi]
            nF = F.normal
            cols = slice(fi * nm, (fi + 1) * nm)
            Z = y[:, None, :] - x[None, :, :]
            r2 = np.einsum("ijk,ijk->ij", Z, Z)
            if fi == ti:
                np.fill_diagonal(r2, 1.0)
                r = np.sqrt(r2)
                inv = 1.0 / (FOUR_PI * r)
                np.fill_diagonal(inv, 0.0)
                t1, t2 = T.tangential
                D1 = -Z[:, :, t1]  # x - y, tangential
                D2 = -Z[:, :, t2]
                wk = inv * wx[None, :]
                # V with first-order Taylor subtraction
                m0 = wk.sum(1)
                m1 = (wk * D1).sum(1)
                m2 = (wk * D2).sum(1)
                mom = T.coplanar_moments(y)
                Vb = wk @ Bx[0] - m0[:, None] * By[0] - m1[:, None] * By[1] - m2[:, None] * By[2]
                Vb += T.single(y)[:, None] * By[0] + (mom["r"] / FOUR_PI)[:, None] * By[1] + (mom["s"] / FOUR_PI)[:, None] * By[2]
                V[rows, cols] = test @ Vb
                # W: coplanar kernel -1/(4 pi r^3), second-order Taylor subtraction
                kw = -inv / r2 * wx[None, :]
                np.fill_diagonal(kw, 0.0)
                q0 = kw.sum(1)
                q1 = (kw * D1).sum(1)
                q2 = (kw * D2).sum(1)
                q11 = (kw * D1 * D1).sum(1)
                q22 = (kw * D2 * D2).sum(1)
                q12 = (kw * D1 * D2).sum(1)
                a1 = -mom["r3u"] / FOUR_PI
                a2 = -mom["r3v"] / FOUR_PI
                a11 = -mom["uu"] / FOUR_PI
                a22 = -mom["vv"] / FOUR_PI
                a12 = -mom["uv"] / FOUR_PI
                Wb = kw @ Bx[0]
                Wb += (fp_self[ti] - q0)[:, None] * By[0]
                Wb += (a1 - q1)[:, None] * By[1] + (a2 - q2)[:, None] * By[2]
                Wb += 0.5 * (a11 - q11)[:, None] * By[3] + 0.5 * (a22 - q22)[:, None] * By[4] + (a12 - q12)[:, None] * By[5]
                W[rows, cols] = test @ Wb
                continue
            r = np.sqrt(r2)
            inv = 1.0 / (FOUR_PI * r)
            zn_x = Z @ nF  # n_x.(y - x)
            zn_y = Z @ nT  # n_y.(y - x)
            kV = inv * wx[None, :]
            kK = zn_x * inv / r2 * wx[None, :]
            kKp = -zn_y * inv / r2 * wx[None, :]
            kW = (3 * zn_y * zn_x / r2 - nT @ nF) * inv / r2 * wx[None, :]
            if F.axis == T.axis:
                V[rows, cols] = test @ (kV @ Bx[0])
                K[rows, cols] = test @ (kK @ Bx[0])
                Kp[rows, cols] = test @ (kKp @ Bx[0])
                W[rows, cols] = test @ (kW @ Bx[0])
                continue
            # adjacent face: subtract the first-order Taylor polynomial of the
            # source density at the nearest edge point
            p1, p2 = _edge_projection(T, F, y)
            Bp = _face_basis(fq.mesh, p1, p2, fq.scales[fi])
            f1, f2 = F.tangential
            X1 = x[None, :, f1] - p1[:, None]
            X2 = x[None, :, f2] - p2[:, None]
            step = 1e-6 * F.a
            lin0 = lambda yy: F.single_linear(yy, 0)  # noqa: E731
            lin1 = lambda yy: F.single_linear(yy, 1)  # noqa: E731
            dl0 = lambda yy: F.double_linear(yy, 0)  # noqa: E731
            dl1 = lambda yy: F.double_linear(yy, 1)  # noqa: E731
            exact = (
                (V, kV, (F.single(y), lin0(y), lin1(y))),
                (K, kK, (F.double(y), dl0(y), dl1(y))),
                (Kp, kKp, tuple(F._fd(fn, y, nT, step) for fn in (F.single, lin0, lin1))),
                (W, kW, tuple(-F._fd(fn, y, nT, step) for fn in (F.double, dl0, dl1))),
            )
            for mat, kern, (e0, e1, e2) in exact:
                s0 = kern.sum(1)
                s1 = (kern * X1).sum(1)
                s2 = (kern * X2).sum(1)
                blk = kern @ Bx[0]
                blk += (e0 - s0)[:, None] * Bp[0]
                blk += (e1 - p1 * e0 - s1)[:, None] * Bp[1]
                blk += (e2 - p2 * e0 - s2)[:, None] * Bp[2]
                mat[rows, cols] = test @ blk
    return V, K, Kp, W


def _remainder_blocks(fq: FaceQuadrature, sk: SplitKernel):
    """Galerkin matrices of the smooth part ``Phi - Phi_0 = -R``."""
    nf = len(fq.panels)
    nm = fq.basis[0].shape[2]
    M = nf * nm
    V = np.zeros((M, M), complex)
    K = np.zeros((M, M), complex)
    Kp = np.zeros((M, M), complex)
    W = np.zeros((M, M), complex)
    for ti, T in enumerate(fq.panels):
        y, wy = fq.points[ti], fq.weights[ti]
        test = (wy[:, None] * fq.basis[ti][0]).T
        rows = slice(ti * nm, (ti + 1) * nm)
        for fi, F in enumerate(fq.panels):
            x, wx = fq.points[fi], fq.weights[fi]
            cols = slice(fi * nm, (fi + 1) * nm)
            Z = (y[:, None, :] - x[None, :, :]).reshape(-1, 3)
            rem = sk.remainder(Z, 2)
            shape = (y.shape[0], x.shape[0])
            R = rem["R"].reshape(shape)
            gx = (rem["grad"] @ F.normal).reshape(shape)
            gy = (rem["grad"] @ T.normal).reshape(shape)
            H = np.einsum("kij,i,j->k", rem["hess"], T.normal, F.normal).reshape(shape)
            src = wx[:, None] * fq.basis[fi][0]
            V[rows, cols] = -(test @ (R @ src))
            K[rows, cols] = test @ (gx @ src)
            Kp[rows, cols] = -(test @ (gy @ src))
            W[rows, cols] = -(test @ (H @ src))
    return V, K, Kp, W


def assemble_A0(
    mesh: BoundaryMesh,
    rho: ComplexFrequency,
    shift=None,
    fine: tuple = (6, 2, 4),
    smooth_order: int = 16,
    cutoff: Cutoff | None = None,
) -> LayerOperators:
    """Assemble the Calderón operator ``A_0`` for the kernel ``G_rho``.

    Parameters
    ----------
    fine
        ``(panels, levels, order)`` of the graded rule used for the free-space
        part.
    smooth_order
        Gauss points per direction for the smooth remainder.
    """
    import time

    if mesh.grid.n != 3:
        raise LayerError("layer operators are implemented for three dimensions")
    t0 = time.perf_counter()
    a = mesh.domain.a
    fq = FaceQuadrature(mesh, graded_rule(a, *fine))
    V0, K0, Kp0, W0 = _free_space_blocks(fq)
    s, w = legendre.leggauss(smooth_order)
    sq = FaceQuadrature(mesh, (a * s, a * w))
    sk = SplitKernel(mesh.grid, rho, shift, cutoff)
    VR, KR, KpR, WR = _remainder_blocks(sq, sk)
    V, K, Kp, W = V0 + VR, K0 + KR, Kp0 + KpR, W0 + WR
    M = mesh.basis_size
    gram = np.zeros((M, M))
    nm = fq.basis[0].shape[2]
    for fi in range(len(fq.panels)):
        B = fq.basis[fi][0]
        sl = slice(fi * nm, (fi + 1) * nm)
        gram[sl, sl] = B.T @ (fq.weights[fi][:, None] * B)
    Gi = np.linalg.inv(gram)
    I = np.eye(M)
    P = np.block([[0.5 * I - Gi @ K, Gi @ V], [Gi @ W, 0.5 * I + Gi @ Kp]])
    flagged = int(np.count_nonzero(~np.isfinite(P)))
    if flagged:
        P = np.where(np.isfinite(P), P, 0.0)
    return LayerOperators(mesh, rho, V, K, Kp, W, gram, -P, flagged, time.perf_counter() - t0, sk)


# --------------------------------------------------------------------------
# off-boundary evaluation and the jump relations


def _face_points(a: float, per_axis: int, reach: float) -> np.ndarray:
    t = np.linspace(-reach * a, reach * a, per_axis)
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    return np.stack([T1.ravel(), T2.ravel()], axis=1)


def layer_potential(ops: LayerOperators, f: np.ndarray, g: np.ndarray, foot_face: int, foot: np.ndarray, offsets: np.ndarray,
                    fine: tuple = (6, 2, 4), smooth_order: int = 16) -> np.ndarray:
    """``u = D f - S g`` at ``foot + offset * n`` for points above one face.

    ``f`` and ``g`` are coefficient vectors; ``foot`` holds tangential
    coordinates on face ``foot_face`` (kept away from its edges) and
    ``offsets`` the signed distances along the outward normal.  Returns an
    array of shape ``(len(offsets), len(foot))``.  The foot face uses a
    first-order Taylor subtraction with analytic rectangle moments; other
    faces and the smooth remainder use plain tensor Gauss rules.
    """
    mesh = ops.mesh
    a = mesh.domain.a
    fq = FaceQuadrature(mesh, graded_rule(a, *fine))
    s, w = legendre.leggauss(smooth_order)
    sq = FaceQuadrature(mesh, (a * s, a * w))
    nm = fq.basis[0].shape[2]
    T = fq.panels[foot_face]
    t1, t2 = T.tangential
    out = np.zeros((len(offsets), len(foot)), dtype=complex)
    pB = _face_basis(mesh, foot[:, 0], foot[:, 1], fq.scales[foot_face])
    for oi, off in enumerate(offsets):
        y = np.zeros((len(foot), 3))
        y[:, T.axis] = T.side * (a + off)
        y[:, t1] = foot[:, 0]
        y[:, t2] = foot[:, 1]
        val = np.zeros(len(foot), dtype=complex)
        for fi, F in enumerate(fq.panels):
            cf = slice(fi * nm, (fi + 1) * nm)
            x, wx = fq.points[fi], fq.weights[fi]
            Z = y[:, None, :] - x[None, :, :]
            r2 = np.einsum("ijk,ijk->ij", Z, Z)
            r = np.sqrt(r2)
            kS = wx[None, :] / (FOUR_PI * r)
            kD = (Z @ F.normal) * wx[None, :] / (FOUR_PI * r * r2)
            dens_f = fq.basis[fi][0] @ f[cf]
            dens_g = fq.basis[fi][0] @ g[cf]
            if fi != foot_face:
                val += kD @ dens_f - kS @ dens_g
                continue
            X1 = x[None, :, t1] - foot[:, 0:1]
            X2 = x[None, :, t2] - foot[:, 1:2]
            for kern, dens, coef, exact, sign in (
                (kD, dens_f, f[cf], (T.double(y), T.double_linear(y, 0), T.double_linear(y, 1)), 1.0),
                (kS, dens_g, g[cf], (T.single(y), T.single_linear(y, 0), T.single_linear(y, 1)), -1.0),
            ):
                c0, c1, c2 = (pB[k] @ coef for k in range(3))
                rest = kern @ dens - kern.sum(1) * c0 - (kern * X1).sum(1) * c1 - (kern * X2).sum(1) * c2
                e0, e1, e2 = exact
                rest += e0 * c0 + (e1 - foot[:, 0] * e0) * c1 + (e2 - foot[:, 1] * e0) * c2
                val += sign * rest
        if ops.kernel is not None:
            for fi, F in enumerate(sq.panels):
                cf = slice(fi * nm, (fi + 1) * nm)
                x, wx = sq.points[fi], sq.weights[fi]
                Z = (y[:, None, :] - x[None, :, :]).reshape(-1, 3)
                rem = ops.kernel.remainder(Z, 1)
                shape = (len(foot), x.shape[0])
                R = rem["R"].reshape(shape)
                gx = (rem["grad"] @ F.normal).reshape(shape)
                B = sq.basis[fi][0]
                val += (gx * wx[None, :]) @ (B @ f[cf]) + (R * wx[None, :]) @ (B @ g[cf])
        out[oi] = val
    return out


@dataclass
class JumpReport:
    """Defects of the jump relations (relative L2 over the probe points)."""

    dirichlet_jump: np.ndarray
    neumann_jump: np.ndarray
    dirichlet_jump_defect: float
    neumann_jump_defect: float
    interior_defect: float
    exterior_defect: float


def _rel(err: np.ndarray, ref: np.ndarray) -> float:
    nr = float(np.linalg.norm(ref))
    ne = float(np.linalg.norm(err))
    if nr == 0.0:
        return ne
    return ne / nr


def jump_relation_check(ops: LayerOperators, phi: np.ndarray, psi: np.ndarray, per_axis: int = 5, reach: float = 0.6,
                        delta: float | None = None) -> JumpReport:
    """Check the jump relations of ``u = -S(phi) + D(psi)``.

    Traces are extrapolated quadratically from shells at distances
    ``delta, 2 delta, 3 delta`` on each side of every face (probe feet on a
    ``per_axis`` square lattice covering ``reach`` of the face).  The
    Dirichlet jump ``T_+ u - T_- u`` should equal ``psi`` and the Neumann
    jump ``phi``; the interior traces should equal ``A_0 (psi, phi)`` and
    the exterior ones ``(psi, phi) + A_0 (psi, phi)`` (pairs ordered
    Dirichlet, Neumann).
    """
    mesh = ops.mesh
    a = mesh.domain.a
    M = mesh.basis_size
    nm = M // len(mesh.faces)
    delta = a / 16 if delta is None else delta
    phi = np.asarray(phi, dtype=complex)
    psi = np.asarray(psi, dtype=complex)
    pred_in = ops.A0 @ np.concatenate([psi, phi])
    foot = _face_points(a, per_axis, reach)
    d = delta * np.arange(1, 4)
    offsets = np.concatenate([-d, d])
    scales = _basis_scales(mesh)
    rows = {k: [] for k in ("jd", "jn", "rd", "rn", "in_d", "in_n", "pin_d", "pin_n", "out_d", "out_n", "pout_d", "pout_n")}
    for fi, face in enumerate(mesh.faces):
        cf = slice(fi * nm, (fi + 1) * nm)
        u = layer_potential(ops, psi, phi, fi, foot, offsets)
        ui, uo = u[:3], u[3:]
        trace = lambda v: 3 * v[0] - 3 * v[1] + v[2]  # noqa: E731
        slope = lambda v: (-2.5 * v[0] + 4 * v[1] - 1.5 * v[2]) / delta  # noqa: E731
        Ti_d, Ti_n = trace(ui), -slope(ui)
        To_d, To_n = trace(uo), slope(uo)
        B = _face_basis(mesh, foot[:, 0], foot[:, 1], scales[cf])[0]
        rows["jd"].append(To_d - Ti_d)
        rows["jn"].append(To_n - Ti_n)
        rows["rd"].append(B @ psi[cf])
        rows["rn"].append(B @ phi[cf])
        rows["in_d"].append(Ti_d)
        rows["in_n"].append(Ti_n)
        rows["pin_d"].append(B @ pred_in[:M][cf])
        rows["pin_n"].append(B @ pred_in[M:][cf])
        rows["out_d"].append(To_d)
        rows["out_n"].append(To_n)
        rows["pout_d"].append(B @ (psi + pred_in[:M])[cf])
        rows["pout_n"].append(B @ (phi + pred_in[M:])[cf])
    c = {k: np.concatenate(v) for k, v in rows.items()}
    inner = _rel(np.concatenate([c["in_d"] - c["pin_d"], c["in_n"] - c["pin_n"]]), np.concatenate([c["pin_d"], c["pin_n"]]))
    outer = _rel(np.concatenate([c["out_d"] - c["pout_d"], c["out_n"] - c["pout_n"]]), np.concatenate([c["pout_d"], c["pout_n"]]))
    return JumpReport(c["jd"], c["jn"], _rel(c["jd"] - c["rd"], c["rd"]), _rel(c["jn"] - c["rn"], c["rn"]), inner, outer)
