"""Potential walls, their regularisations, and Feynman-Kac estimates.

A wall is ``q(x) = -dist(x, H)^mu c0(x)`` with ``mu < -2`` around a sphere
``H`` bounding the inner region ``Omega_0``.  Brownian paths cannot cross
such a wall with positive weight, so solutions of the regularised problems
``(Delta + q_n) u_n = 0`` decay inside ``Omega_0`` as ``n`` grows and the
Cauchy data stop seeing what lies inside.  The regularisation clamps ``q``
at ``-c1 n^(-mu)`` within distance ``1/n`` of ``H``.

The Monte Carlo walker runs with generator ``Delta`` (steps of standard
deviation ``sqrt(2 dt)`` per coordinate), the normalisation that matches
the PDE ``Delta u + q u = 0`` without a factor one half.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .forward import DirichletProblem, dtn_matrix
from .grid import BoundaryMesh, DomainSpec, GridSpec, ScalarField

log = logging.getLogger(__name__)

CLAMP_SOFTNESS = 0.02
"""Width of the smooth clamp, relative to the clamp level ``c1 n^(-mu)``."""


class WallError(ValueError):
    pass


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


@dataclass(frozen=True)
class WallSpec:
    """Sphere wall ``q = -dist(x, H)^mu c0(x)``.

    Parameters
    ----------
    center, radius
        The sphere ``H`` (a circle when ``n = 2``).
    mu
        Wall exponent; ``mu < -2`` unless ``mild`` is set.
    c0
        Amplitude on the collar; ``c0(x) = c0`` for ``dist < collar / 2`` and
        decays smoothly to zero at ``dist = collar``.
    c1
        Clamp constant, ``0 < c1 < c0``.
    collar
        Width of the neighbourhood ``V`` of ``H`` carrying the wall.
    mild
        Allow ``-2 <= mu < 0``; used only for contrast runs.
    """

    center: tuple = (0.0, 0.0)
    radius: float = 0.5
    mu: float = -3.0
    c0: float = 1.0
    c1: float = 0.5
    collar: float = 0.3
    E: float = 0.0
    mild: bool = False

    def __post_init__(self):
        if not self.mild and not self.mu < -2:
            raise WallError(f"wall exponent mu={self.mu} must be < -2")
        if self.mu >= 0:
            raise WallError("mu must be negative")
        if not 0 < self.c1 < self.c0:
            raise WallError(f"need 0 < c1 < c0 (got c1={self.c1}, c0={self.c0})")
        if self.radius <= self.collar:
            raise WallError("collar reaches the centre of the inner region")

    @property
    def n(self) -> int:
        return len(self.center)

    def validate(self, domain: DomainSpec) -> None:
        reach = np.max(np.abs(self.center)) + self.radius + self.collar
        if reach >= domain.a:
            raise WallError(f"wall collar reaches the boundary (extent {reach:.3f} >= a={domain.a})")

    def dist(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.abs(np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius)

    def signed(self, pts: np.ndarray) -> np.ndarray:
        """``|x - center| - radius`` (negative inside ``Omega_0``)."""
        return np.linalg.norm(np.asarray(pts, dtype=float) - np.asarray(self.center), axis=-1) - self.radius

    def amplitude(self, d: np.ndarray) -> np.ndarray:
        return self.c0 * (1.0 - _smoothstep((d - self.collar / 2) / (self.collar / 2)))

    def q(self, pts: np.ndarray) -> np.ndarray:
        """Raw wall potential; ``-inf`` on ``H`` itself."""
        d = self.dist(pts)
        amp = self.amplitude(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = -amp * d**self.mu
        return np.where(amp > 0, val, 0.0)


@dataclass(eq=False)
class Wall:
    """A wall sampled on a grid: distance and amplitude fields plus the evaluator."""

    spec: WallSpec
    grid: GridSpec
    dist: np.ndarray
    raw: np.ndarray  # may hold -inf on nodes lying on H

    def field(self) -> ScalarField:
        """The raw wall as a field; fails if a node lies exactly on ``H``."""
        if not np.all(np.isfinite(self.raw)):
            raise WallError("grid nodes lie on H; use regularize() for a finite field")
        return ScalarField(self.grid, self.raw.astype(complex))

    def inner_mask(self) -> np.ndarray:
        """Nodes strictly inside ``Omega_0``."""
        return self.spec.signed(_nodes(self.grid)) < 0


def _nodes(grid: GridSpec) -> np.ndarray:
    return np.stack(grid.coords(), axis=-1)


def build_wall(spec: WallSpec, grid: GridSpec, domain: DomainSpec | None = None) -> Wall:
    """Sample the wall ``q = -dist^mu c0`` on ``grid`` (non-positive, ``-inf`` on ``H``)."""
    if spec.n != grid.n:
        raise WallError(f"wall dimension {spec.n} does not match grid dimension {grid.n}")
    if domain is not None:
        spec.validate(domain)
    x = _nodes(grid)
    return Wall(spec, grid, spec.dist(x), spec.q(x))


@dataclass(eq=False)
class RegularizedWall:
    n: int
    level: float  # clamp level -c1 n^(-mu)
    field: ScalarField

    @property
    def values(self) -> np.ndarray:
        return self.field.values.real


def clamp(q: np.ndarray, d: np.ndarray, n: int, c1: float, mu: float, softness: float = CLAMP_SOFTNESS) -> np.ndarray:
    """``q_n``: ``q`` where ``d > 1/n``, a smooth ``max(q, -c1 n^(-mu))`` elsewhere.

    The smooth maximum is ``b + w log(1 + exp((q - b) / w))`` with
    ``b = -c1 n^(-mu)`` and ``w = softness * |b|``.  It never lies below
    either argument and exceeds their maximum by at most ``w log 2``.
    """
    b = -c1 * float(n) ** (-mu)
    w = softness * abs(b)
    with np.errstate(invalid="ignore"):
        soft = b + w * np.logaddexp(0.0, (q - b) / w)
    return np.where(d > 1.0 / n, q, soft)


def regularize(wall: Wall, n: int, c1: float | None = None) -> RegularizedWall:
    """Regularised wall ``q_n`` (finite, non-positive away from the clamp excess)."""
    if n < 1:
        raise WallError("regularisation index must be >= 1")
    c1 = wall.spec.c1 if c1 is None else c1
    qn = clamp(wall.raw, wall.dist, n, c1, wall.spec.mu)
    return RegularizedWall(n, -c1 * float(n) ** (-wall.spec.mu), ScalarField(wall.grid, qn.astype(complex)))


# -- deterministic solves ------------------------------------------------------


def dirichlet_energy(mesh: BoundaryMesh, u: np.ndarray, q: np.ndarray, E: float = 0.0) -> float:
    """Discrete functional ``G(u) = sum_edges |grad u|^2 h^n - sum_interior (q + E) u^2 h^n``.

    Edges join neighbouring nodes of the closed cube; an edge lying in a
    face gets weight one half per boundary direction (trapezoid rule), so
    ``G(x_1) = |Omega|`` exactly.  Those edges join boundary nodes only, hence
    the minimiser over fields with fixed boundary values still solves the
    ``2n + 1`` point scheme.
    """
    g = mesh.grid
    c, m = g.N // 2, mesh.m
    box = tuple(slice(c - m, c + m + 1) for _ in range(g.n))
    ub = np.real(u[box])
    vol = g.h**g.n
    edge = np.ones(2 * m + 1)
    edge[[0, -1]] = 0.5
    grad = 0.0
    for d in range(g.n):
        diff = np.diff(ub, axis=d) / g.h
        w = np.ones(diff.shape)
        for e in range(g.n):
            if e != d:
                shape = [1] * g.n
                shape[e] = -1
                w = w * edge.reshape(shape)
        grad += float(np.sum(w * diff**2))
    inner = tuple(slice(c - m + 1, c + m) for _ in range(g.n))
    pot = float(np.sum((np.real(q[inner]) + E) * np.real(u[inner]) ** 2))
    return (grad - pot) * vol


@dataclass(eq=False)
class WallSolve:
    n: int
    u: np.ndarray
    G: float
    G_comparator: float
    condition: float


def comparator(mesh: BoundaryMesh, wall: Wall, f, gap: float) -> np.ndarray:
    """Zero-extension comparator ``F``: the ``q = 0`` solution cut off within ``gap`` of ``H``.

    ``F`` shares the boundary data of the regularised solutions and vanishes
    where ``dist(x, H) < gap``, so its functional value is finite for the raw
    wall and bounds every ``G_n(u_n)``.
    """
    u0 = DirichletProblem(mesh).solve(_datum(mesh, f)).u.real
    chi = _smoothstep((wall.dist - gap) / gap)
    return u0 * chi


def _datum(mesh: BoundaryMesh, f) -> np.ndarray:
    return np.asarray(f(mesh.points), dtype=float) if callable(f) else np.asarray(f, dtype=float)


def solve_regularized(mesh: BoundaryMesh, wall: Wall, n: int, f, E: float = 0.0, gap: float = 0.1) -> WallSolve:
    """Solve ``(Delta_h + q_n + E) u_n = 0`` with ``u_n = f`` on the boundary.

    Also evaluates the discrete functional at ``u_n`` and at the comparator
    of :func:`comparator` (with the raw wall, where it is finite).
    """
    reg = regularize(wall, n)
    prob = DirichletProblem(mesh, reg.field, E)
    sol = prob.solve(_datum(mesh, f))
    u = sol.u.real
    F = comparator(mesh, wall, f, gap)
    qraw = np.where(F != 0, wall.raw, 0.0)
    return WallSolve(n, u, dirichlet_energy(mesh, u, reg.values, E), dirichlet_energy(mesh, F, qraw, E), prob.condition)


# -- decay and invariance studies ---------------------------------------------


@dataclass
class DecayRow:
    n: int
    sup_inner: float
    sup_outer: float
    G: float
    bound_shape: float


@dataclass(eq=False)
class DecayStudy:
    rows: list[DecayRow]
    exponent: float  # 2 (2 + mu) / mu
    fit_rate: float
    fit_floor: float
    G_comparator: float

    @property
    def ratio(self) -> float:
        """``sup_inner`` at the first ``n`` over ``sup_inner`` at the last."""
        return self.rows[0].sup_inner / max(self.rows[-1].sup_inner, 1e-300)

    @property
    def outer_change(self) -> float:
        s = [r.sup_outer for r in self.rows]
        return max(s) / min(s)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("n,sup_inner,sup_outer,G_value,bound_shape\n")
            for r in self.rows:
                fh.write(f"{r.n},{r.sup_inner:.12e},{r.sup_outer:.12e},{r.G:.12e},{r.bound_shape:.12e}\n")


def _fit_decay(ns, sups, gamma) -> tuple[float, float]:
    """Least-squares ``sup ~ floor + A exp(-c n^gamma)`` via ``log`` of the first differences."""
    ns = np.asarray(ns, float)
    s = np.asarray(sups, float)
    floor = max(float(s.min()) * 0.5, 0.0)
    y = np.log(np.maximum(s - floor, 1e-300))
    c = -np.polyfit(ns**gamma, y, 1)[0]
    return float(c), floor


def interior_decay_study(mesh: BoundaryMesh, wall: Wall, ns, f) -> DecayStudy:
    """``sup |u_n|`` inside and outside ``Omega_0`` over a schedule of ``n``."""
    spec = wall.spec
    x = _nodes(mesh.grid)
    signed = spec.signed(x)
    c, m = mesh.grid.N // 2, mesh.m
    interior = np.zeros(mesh.grid.shape, bool)
    interior[tuple(slice(c - m + 1, c + m) for _ in range(mesh.grid.n))] = True
    inner = interior & (signed < 0)
    outer = interior & (signed > 0)
    gamma = 2 * (2 + spec.mu) / spec.mu
    rows = []
    Gc = math.nan
    for n in ns:
        sol = solve_regularized(mesh, wall, n, f, spec.E)
        Gc = sol.G_comparator
        rows.append(DecayRow(n, float(np.max(np.abs(sol.u[inner]))), float(np.max(np.abs(sol.u[outer]))), sol.G, math.exp(-(n**gamma))))
    sups = [r.sup_inner for r in rows]
    if max(sups) == 0:
        rate, floor = 0.0, 0.0
    else:
        rate, floor = _fit_decay([r.n for r in rows], sups, gamma)
    return DecayStudy(rows, gamma, rate, floor, Gc)


@dataclass
class InvarianceRow:
    n: int
    divergence: float
    skipped: str = ""


def cauchy_invariance_test(mesh: BoundaryMesh, wall: Wall, qA, qB, ns, E: float = 0.0, ord=2) -> list[InvarianceRow]:
    """``||Lambda_A - Lambda_B|| / ||Lambda_A||`` for ``q_n + qA`` against ``q_n + qB``.

    ``qA`` and ``qB`` are grid arrays (or ``None`` for zero) supported inside
    ``Omega_0``.  Near-eigenvalue solves are reported as skipped rows.
    """
    from .forward import NearEigenvalueError

    g = mesh.grid
    A = np.zeros(g.shape) if qA is None else np.real(np.asarray(getattr(qA, "values", qA)))
    B = np.zeros(g.shape) if qB is None else np.real(np.asarray(getattr(qB, "values", qB)))
    rows = []
    for n in ns:
        qn = regularize(wall, n).values
        try:
            LA = dtn_matrix(mesh, qn + A, E)
            LB = LA if np.array_equal(A, B) else dtn_matrix(mesh, qn + B, E)
        except NearEigenvalueError as exc:
            rows.append(InvarianceRow(n, math.nan, str(exc)))
            continue
        rows.append(InvarianceRow(n, float(np.linalg.norm(LA - LB, ord) / np.linalg.norm(LA, ord))))
    return rows


# -- Feynman-Kac ----------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    paths: int = 100_000
    dt: float = 2.5e-4
    seed: int = 0
    stream: int = 0
    max_steps: int = 200_000
    chunk: int = 256


@dataclass(eq=False)
class PathEnsemble:
    """Per-path records of one Monte Carlo run."""

    config: EnsembleConfig
    exit_points: np.ndarray
    integrals: np.ndarray  # accumulated sum q(B_t) dt (non-positive for q <= 0)
    exit_times: np.ndarray
    hit_H: np.ndarray
    hit_times: np.ndarray
    capped: int

    @property
    def hit_fraction(self) -> float:
        return float(np.mean(self.hit_H))


def _rng(cfg: EnsembleConfig) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, cfg.stream])))


def run_paths(x0, cfg: EnsembleConfig, a: float, qtab: np.ndarray | None = None, origin: float = 0.0, h: float = 1.0,
              center=None, radius: float = 0.0, stop_on_hit: bool = False, backend=None) -> PathEnsemble:
    """Simulate ``cfg.paths`` walks from ``x0`` until they leave ``[-a, a]^n``.

    ``qtab`` is the potential on grid nodes ``origin + h i``; ``None`` means
    ``q = 0``.  Increments are drawn chunk by chunk only for live paths, so
    the output depends on the seed and the configuration, not the backend.
    """
    mod = kernels if backend is None else backend
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    P = cfg.paths
    if qtab is None:
        qtab = np.zeros((2,) * n)
        origin, h = -a, 2 * a
    qtab = np.ascontiguousarray(qtab, dtype=float)
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    pos = np.tile(x0, (P, 1))
    acc = np.zeros(P)
    alive = np.ones(P, dtype=np.uint8)
    tau = np.full(P, np.nan)
    hit = np.zeros(P, dtype=np.uint8)
    hit_t = np.full(P, np.nan)
    rng = _rng(cfg)
    steps = 0
    while steps < cfg.max_steps:
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        S = min(cfg.chunk, cfg.max_steps - steps)
        incr = rng.standard_normal((idx.size, S, n))
        expo = rng.standard_exponential((idx.size, S, n))
        sub = [np.ascontiguousarray(arr[idx]) for arr in (pos, acc, alive, tau, hit, hit_t)]
        mod.walk_chunk(*sub, incr, expo, cfg.dt, steps * cfg.dt, qtab, origin, h, a, center, radius, stop_on_hit)
        for arr, s in zip((pos, acc, alive, tau, hit, hit_t), sub):
            arr[idx] = s
        steps += S
    capped = int(np.count_nonzero(alive))
    return PathEnsemble(cfg, pos, acc, tau, hit.astype(bool), hit_t, capped)


@dataclass
class FKResult:
    mean: float
    stderr: float
    ensemble: PathEnsemble
    seconds: float


def feynman_kac_estimate(x, mesh: BoundaryMesh, q, f, cfg: EnsembleConfig = EnsembleConfig(), wall: WallSpec | None = None,
                         backend=None) -> FKResult:
    """Monte Carlo value of ``E[exp(int_0^tau q(B_t) dt) f(B_tau)]``.

    Parameters
    ----------
    x
        Start point inside the cube of ``mesh``.
    q
        Potential on the grid of ``mesh`` (array, field, or ``None``);
        interpolated multilinearly along the paths.
    f
        Boundary datum, a callable on points of shape ``(k, n)``.
    wall
        Optional wall whose sphere is used for the hit flags.
    """
    t0 = time.perf_counter()
    g = mesh.grid
    a = mesh.domain.a
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) >= a):
        raise WallError("start point must lie inside the domain")
    qtab = None if q is None else np.real(np.asarray(getattr(q, "values", q)))
    center = None if wall is None else wall.center
    radius = 0.0 if wall is None else wall.radius
    ens = run_paths(x, cfg, a, qtab, -g.L, g.h, center, radius, backend=backend)
    done = ens.exit_times == ens.exit_times  # finished paths (tau is not NaN)
    if ens.capped > 0.01 * cfg.paths:
        log.warning("%d of %d paths hit the step cap", ens.capped, cfg.paths)
    vals = np.exp(ens.integrals[done]) * np.asarray(f(ens.exit_points[done]), dtype=float)
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.inf
    return FKResult(mean, stderr, ens, time.perf_counter() - t0)


def fd_value(u: np.ndarray, grid: GridSpec, x) -> float:
    """Multilinear interpolation of a grid solution at the point ``x``."""
    return float(kernels.multilinear(np.real(u), -grid.L, grid.h, np.atleast_2d(x))[0])


@dataclass
class FKRow:
    x: tuple
    fk_mean: float
    fk_stderr: float
    fd_value: float
    fd_tol: float

    @property
    def agrees(self) -> bool:
        return abs(self.fk_mean - self.fd_value) <= 3 * self.fk_stderr + self.fd_tol


def fk_compare(points, mesh: BoundaryMesh, wall: Wall | None, n: int | None, f, cfg: EnsembleConfig, coarse: BoundaryMesh | None = None) -> list[FKRow]:
    """Feynman-Kac against the finite-difference solution at probe points.

    The FD tolerance at each point is ``|u_h - u_2h|`` from a solve on the
    coarser mesh ``coarse`` (half the resolution by default).
    """
    def solve(m: BoundaryMesh):
        if wall is None:
            qf = None
            u = DirichletProblem(m).solve(_datum(m, f)).u
        else:
            w = build_wall(wall.spec, m.grid)
            qf = regularize(w, n).values
            u = DirichletProblem(m, qf).solve(_datum(m, f)).u
        return u, qf

    u, qf = solve(mesh)
    if coarse is None:
        g = mesh.grid
        coarse = BoundaryMesh(GridSpec(g.n, g.L, g.N // 2), mesh.domain, mesh.degree, mesh.basis_kind)
    uc, _ = solve(coarse)
    rows = []
    for i, x in enumerate(points):
        c = EnsembleConfig(cfg.paths, cfg.dt, cfg.seed, cfg.stream + i, cfg.max_steps, cfg.chunk)
        res = feynman_kac_estimate(x, mesh, qf, f, c, None if wall is None else wall.spec)
        fv = fd_value(u, mesh.grid, x)
        rows.append(FKRow(tuple(float(v) for v in x), res.mean, res.stderr, fv, abs(fv - fd_value(uc, coarse.grid, x))))
    return rows


# -- Brownian scaling -------------------------------------------------------------


def exit_times_ball(r: float, cfg: EnsembleConfig, n: int = 2) -> np.ndarray:
    """First exit times of the walk from the centred ball of radius ``r``."""
    ens = run_paths(np.zeros(n), cfg, a=4 * r, center=np.zeros(n), radius=r, stop_on_hit=True)
    return ens.exit_times[np.isfinite(ens.exit_times)]


def scaling_check(radii=(0.1, 0.2), cfg: EnsembleConfig = EnsembleConfig(paths=20_000, dt=1e-6), n: int = 2) -> float:
    """Kolmogorov-Smirnov distance between exit-time laws rescaled by ``r^2``."""
    from scipy.stats import ks_2samp

    samples = []
    for i, r in enumerate(radii):
        c = EnsembleConfig(cfg.paths, cfg.dt, cfg.seed, cfg.stream + i, cfg.max_steps, cfg.chunk)
        samples.append(exit_times_ball(r, c, n) / r**2)
    return float(max(ks_2samp(samples[0], s).statistic for s in samples[1:]))
