"""Periodic grids, scalar fields, the embedded cube domain and its boundary.

All fields live on the torus box ``[-L, L)^n`` sampled with ``N`` nodes per
axis.  The computational domain is the cube ``[-a, a]^n`` centred at the
origin; ``a`` must be a multiple of the spacing so that the cube faces are
grid planes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.polynomial import legendre

FIELD_MAGIC = b"CLAB"
FIELD_VERSION = 1


class GridError(ValueError):
    """Invalid grid, domain or boundary configuration."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on ``[-L, L)^n`` with ``N`` nodes per axis."""

    n: int
    L: float
    N: int

    def __post_init__(self):
        if self.n not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {self.n}")
        if self.N % 2:
            raise GridError("N must be even")
        if self.N < 16:
            raise GridError(f"N must be at least 16, got {self.N}")
        if not self.L > 0:
            raise GridError("L must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.n

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.N)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """1-D dual lattice in FFT order, multiples of ``pi / L``."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.h)

    @property
    def zeta_max(self) -> float:
        return np.pi / self.h

    def coords(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.axis] * self.n), indexing="ij")

    def zeta(self, shift=None) -> list[np.ndarray]:
        """Broadcastable frequency components, optionally shifted by ``shift``."""
        shift = np.zeros(self.n) if shift is None else np.asarray(shift, dtype=float)
        out = []
        for d in range(self.n):
            s = [1] * self.n
            s[d] = self.N
            out.append((self.wavenumbers + shift[d]).reshape(s))
        return out

    def index_of(self, x: float) -> int:
        """Grid index of coordinate ``x``; ``x`` must be a node."""
        i = (x + self.L) / self.h
        if abs(i - round(i)) > 1e-9:
            raise GridError(f"{x} is not a grid coordinate")
        return int(round(i))


@dataclass(frozen=True)
class DomainSpec:
    """Cube ``[-a, a]^n`` with a collar of width ``w`` next to its boundary."""

    a: float
    w: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise GridError("a must be positive")
        if self.w < 0:
            raise GridError("collar width must be non-negative")

    def check(self, grid: GridSpec) -> int:
        """Validate against ``grid`` and return the half-width in cells."""
        if self.a > grid.L / 2 + 1e-12:
            raise GridError(
                f"domain half-width a={self.a} exceeds L/2={grid.L / 2} (anti-wraparound margin)"
            )
        m = self.a / grid.h
        if abs(m - round(m)) > 1e-9:
            raise GridError(f"a={self.a} is not a multiple of h={grid.h}")
        return int(round(m))

    def volume(self, n: int) -> float:
        return (2 * self.a) ** n

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Mask of points at distance > ``margin`` inside the cube."""
        pts = np.asarray(pts)
        return np.all(np.abs(pts) < self.a - margin, axis=-1)


class Lattice(NamedTuple):
    coords: list[np.ndarray]
    zeta: list[np.ndarray]


def build_grid(spec: GridSpec, domain: DomainSpec | None = None) -> tuple[GridSpec, Lattice]:
    """Node coordinates and dual lattice of ``spec``.

    The lattice is returned in FFT order, reduced to the band
    ``(pi/L) * {-N/2, ..., N/2 - 1}``.
    """
    if domain is not None:
        domain.check(spec)
    return spec, Lattice(spec.coords(), spec.zeta())


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Complex samples on a :class:`GridSpec`."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.size != self.grid.N**self.grid.n:
            raise GridError(f"expected {self.grid.N ** self.grid.n} values, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise GridError("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: GridSpec, func) -> "ScalarField":
        return cls(grid, func(*grid.coords()))

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.values + other.values)

    def __mul__(self, c) -> "ScalarField":
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    def norm(self, p: float = 2.0, mask: np.ndarray | None = None) -> float:
        """Discrete ``L^p`` norm with cell weight ``h^n``."""
        v = self.values if mask is None else self.values[mask]
        return float((np.sum(np.abs(v) ** p) * self.grid.cell_volume) ** (1.0 / p))


def spectral_laplacian(f: ScalarField, shift=None) -> ScalarField:
    """``F^{-1}[-|zeta|^2 F f]`` on the (optionally Bloch-shifted) torus."""
    g = f.grid
    if shift is None:
        z = g.zeta()
        k2 = sum(zj**2 for zj in z)
        return ScalarField(g, np.fft.ifftn(-k2 * np.fft.fftn(f.values)))
    twist = BlochTwist(g, shift)
    z = g.zeta(twist.theta)
    k2 = sum(zj**2 for zj in z)
    return ScalarField(g, twist.apply_multiplier(f.values, -k2))


def spectral_gradient(values: np.ndarray, grid: GridSpec, shift=None) -> list[np.ndarray]:
    twist = BlochTwist(grid, shift)
    z = grid.zeta(twist.theta)
    return [twist.apply_multiplier(values, 1j * zj) for zj in z]


class BlochTwist:
    """Quasi-periodic Fourier representation ``f = e^{i theta x} * periodic``.

    ``shift`` is given in units of the lattice spacing ``pi / L``; ``None``
    means the plain periodic torus.
    """

    def __init__(self, grid: GridSpec, shift=None):
        self.grid = grid
        if shift is None:
            self.theta = np.zeros(grid.n)
        else:
            self.theta = np.broadcast_to(np.asarray(shift, dtype=float), (grid.n,)) * (
                np.pi / grid.L
            )
        self.active = bool(np.any(self.theta != 0))
        if self.active:
            x = grid.coords()
            self.phase = np.exp(1j * sum(t * xi for t, xi in zip(self.theta, x)))
        else:
            self.phase = None

    def forward(self, values: np.ndarray) -> np.ndarray:
        if self.active:
            values = values * self.phase.conj()
        return np.fft.fftn(values, axes=tuple(range(-self.grid.n, 0)))

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        out = np.fft.ifftn(coeffs, axes=tuple(range(-self.grid.n, 0)))
        if self.active:
            out = out * self.phase
        return out

    def apply_multiplier(self, values: np.ndarray, mult: np.ndarray) -> np.ndarray:
        return self.inverse(self.forward(values) * mult)


# --------------------------------------------------------------------------
# boundary of the cube


def _composite_simpson(m2: int, h: float) -> np.ndarray:
    """Simpson weights on ``m2`` equispaced nodes (``m2 - 1`` even)."""
    if (m2 - 1) % 2:
        raise GridError("Simpson rule needs an even number of intervals")
    w = np.ones(m2)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


@dataclass(frozen=True)
class Face:
    axis: int
    side: int  # +1 or -1
    # slice of the mesh node arrays belonging to this face
    start: int
    stop: int


@dataclass(eq=False)
class BoundaryMesh:
    """Quadrature nodes on the faces of ``[-a, a]^n``.

    Each face carries its own copy of the edge nodes, so a node on an edge
    appears once per incident face with that face's normal.  The boundary
    basis is a per-face tensor family of degree ``<= degree``.
    """

    grid: GridSpec
    domain: DomainSpec
    degree: int = 4
    basis_kind: str = "legendre"
    points: np.ndarray = field(init=False)
    normals: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)
    index: np.ndarray = field(init=False)  # grid multi-index of each node
    faces: list = field(init=False)

    def __post_init__(self):
        g, n = self.grid, self.grid.n
        self.m = self.domain.check(g)
        if self.m < 2:
            raise GridError("domain needs at least 2 cells per half-width")
        if self.basis_kind not in ("legendre", "cosine"):
            raise GridError(f"unknown basis kind {self.basis_kind!r}")
        c = g.N // 2
        idx1 = np.arange(c - self.m, c + self.m + 1)
        w1 = _composite_simpson(idx1.size, g.h)
        pts, nrm, wts, ind, faces = [], [], [], [], []
        count = 0
        for axis in range(n):
            for side in (-1, 1):
                others = [d for d in range(n) if d != axis]
                mesh = np.meshgrid(*([idx1] * (n - 1)), indexing="ij")
                k = mesh[0].size
                I = np.empty((k, n), dtype=int)
                I[:, axis] = c + side * self.m
                for d, mm in zip(others, mesh):
                    I[:, d] = mm.ravel()
                wmesh = np.meshgrid(*([w1] * (n - 1)), indexing="ij")
                wf = np.prod([ww.ravel() for ww in wmesh], axis=0)
                nv = np.zeros((k, n))
                nv[:, axis] = side
                ind.append(I)
                pts.append(g.axis[I])
                nrm.append(nv)
                wts.append(wf)
                faces.append(Face(axis, side, count, count + k))
                count += k
        self.index = np.concatenate(ind)
        self.points = np.concatenate(pts)
        self.normals = np.concatenate(nrm)
        self.weights = np.concatenate(wts)
        self.faces = faces

    # -- geometry ------------------------------------------------------------
    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def area(self) -> float:
        n = self.grid.n
        return 2 * n * (2 * self.domain.a) ** (n - 1)

    def flat_index(self) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.index.T), self.grid.shape)

    def tangential(self, face: Face) -> list[int]:
        return [d for d in range(self.grid.n) if d != face.axis]

    # -- basis ---------------------------------------------------------------
    @cached_property
    def _face_modes(self) -> list[tuple[int, ...]]:
        k = self.grid.n - 1
        modes = np.indices((self.degree + 1,) * k).reshape(k, -1).T
        return [tuple(mm) for mm in modes]

    @property
    def basis_size(self) -> int:
        return len(self.faces) * len(self._face_modes)

    def _univariate(self, s: np.ndarray, j: int) -> np.ndarray:
        t = s / self.domain.a
        if self.basis_kind == "legendre":
            c = np.zeros(j + 1)
            c[j] = 1.0
            return legendre.legval(t, c)
        return np.cos(j * np.pi * (t + 1) / 2)

    @cached_property
    def basis(self) -> np.ndarray:
        """Nodal values ``B[node, j]`` of the boundary basis (unit L2 norm)."""
        B = np.zeros((self.size, self.basis_size))
        nm = len(self._face_modes)
        for fi, face in enumerate(self.faces):
            sl = slice(face.start, face.stop)
            tang = self.tangential(face)
            for mi, mode in enumerate(self._face_modes):
                col = np.ones(face.stop - face.start)
                for d, j in zip(tang, mode):
                    col = col * self._univariate(self.points[sl, d], j)
                col /= np.sqrt(np.sum(self.weights[sl] * col**2))
                B[sl, fi * nm + mi] = col
        return B

    @cached_property
    def _projector(self) -> np.ndarray:
        # per-face weighted least squares; faces decouple
        B, W = self.basis, self.weights
        P = np.zeros((self.basis_size, self.size))
        nm = len(self._face_modes)
        for fi, face in enumerate(self.faces):
            sl = slice(face.start, face.stop)
            cols = slice(fi * nm, (fi + 1) * nm)
            Bf = B[sl, cols]
            gram = Bf.T @ (W[sl, None] * Bf)
            P[cols, sl] = np.linalg.solve(gram, Bf.T * W[sl])
        return P

    def project(self, g: np.ndarray) -> np.ndarray:
        """Basis coefficients of nodal data ``g`` (weighted least squares)."""
        return self._projector @ np.asarray(g)

    def synthesize(self, c: np.ndarray) -> np.ndarray:
        return self.basis @ np.asarray(c)

    def gram(self) -> np.ndarray:
        return self.basis.T @ (self.weights[:, None] * self.basis)


def surface_integral(mesh: BoundaryMesh, g: np.ndarray) -> complex:
    """Quadrature ``sum_i w_i g_i`` over the boundary nodes."""
    g = np.asarray(g)
    if g.shape[0] != mesh.size:
        raise GridError(f"expected {mesh.size} boundary values, got {g.shape[0]}")
    return complex(np.tensordot(mesh.weights, g, axes=(0, 0)))


@dataclass(eq=False)
class CauchyPair:
    """Boundary trace and outward normal derivative on a :class:`BoundaryMesh`."""

    mesh: BoundaryMesh
    dirichlet: np.ndarray
    neumann: np.ndarray
    rho: np.ndarray | None = None

    @classmethod
    def from_coefficients(cls, mesh: BoundaryMesh, coeffs: np.ndarray, rho=None) -> "CauchyPair":
        M = mesh.basis_size
        coeffs = np.asarray(coeffs)
        return cls(mesh, mesh.synthesize(coeffs[:M]), mesh.synthesize(coeffs[M:]), rho)

    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.mesh.project(self.dirichlet), self.mesh.project(self.neumann)])

    def __sub__(self, other: "CauchyPair") -> "CauchyPair":
        return CauchyPair(self.mesh, self.dirichlet - other.dirichlet, self.neumann - other.neumann, self.rho)

    def scaled(self, c) -> "CauchyPair":
        return CauchyPair(self.mesh, c * self.dirichlet, c * self.neumann, self.rho)


def boundary_values(mesh: BoundaryMesh, u: np.ndarray) -> np.ndarray:
    """Restriction of a grid array to the boundary nodes."""
    return np.asarray(u)[tuple(mesh.index.T)]


def normal_derivative(mesh: BoundaryMesh, u: np.ndarray) -> np.ndarray:
    """One-sided second-order outward normal derivative at boundary nodes."""
    u = np.asarray(u)
    h = mesh.grid.h
    I = mesh.index
    out = np.empty(mesh.size, dtype=np.result_type(u, float))
    for face in mesh.faces:
        sl = slice(face.start, face.stop)
        i0 = I[sl].copy()
        i1 = i0.copy()
        i2 = i0.copy()
        i1[:, face.axis] -= face.side
        i2[:, face.axis] -= 2 * face.side
        out[sl] = (3 * u[tuple(i0.T)] - 4 * u[tuple(i1.T)] + u[tuple(i2.T)]) / (2 * h)
    return out


def trace_and_normal(u, mesh: BoundaryMesh) -> CauchyPair:
    """Cauchy pair of a grid function on the cube boundary.

    ``u`` may be a :class:`ScalarField` or an array on the full grid.  The
    trace is a restriction; the normal derivative uses the one-sided
    three-point stencil, exact on quadratics.
    """
    vals = u.values if isinstance(u, ScalarField) else np.asarray(u)
    if vals.shape != mesh.grid.shape:
        raise GridError("field does not live on the mesh grid")
    return CauchyPair(mesh, boundary_values(mesh, vals), normal_derivative(mesh, vals))


# --------------------------------------------------------------------------
# binary field cache

_HEADER = struct.Struct("<4sHHId")


def write_field(path, f: ScalarField | np.ndarray, grid: GridSpec | None = None) -> None:
    """Write ``CLAB`` header (magic, version, n, N, L) and complex128 samples."""
    if isinstance(f, ScalarField):
        grid, values = f.grid, f.values
    else:
        values = np.asarray(f)
    if grid is None:
        raise GridError("grid required for raw arrays")
    data = np.ascontiguousarray(values, dtype="<c16")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, grid.n, grid.N, grid.L))
        fh.write(data.tobytes(order="C"))
    tmp.replace(path)


def read_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, n, N, L = _HEADER.unpack(head)
        if magic != FIELD_MAGIC:
            raise GridError(f"{path}: bad magic {magic!r}")
        if version != FIELD_VERSION:
            raise GridError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype="<c16")
    grid = GridSpec(n, L, N)
    return ScalarField(grid, data.reshape(grid.shape))
