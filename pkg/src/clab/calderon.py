"""Recovery of CGO traces from Cauchy data and of ``q^(xi)`` from boundary integrals.

The blind path splits the plane-wave trace ``T e^{rho.x}`` into a part in
the sampled Cauchy data ``CD_q`` and a part in the span of exterior Faddeev
point-source fields.  Point sources ``G_rho(. - y)`` with ``y`` in the cube
are harmonic outside it with the right growth, so their Cauchy pairs lie in
the kernel of ``A_0``; the ``CD_q`` component is the trace of the CGO
solution.  The split is computed by asking the remainder to satisfy the
DtN relation, solved by truncated SVD.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cgo import (
    CGO_SHIFT,
    SolverError,
    cgo_field,
    grid_fourier,
    plane_wave_pair,
    solve_corrector,
)
from .faddeev import (
    ComplexFrequency,
    FrequencyError,
    FrequencyPair,
    beta_for_modulus,
    faddeev_kernel_table,
    make_frequency_pair,
)
from .forward import CauchySubspace
from .grid import BoundaryMesh, CauchyPair, DomainSpec, GridSpec, ScalarField, surface_integral
from .layers import JumpReport, LayerOperators, assemble_A0, jump_relation_check  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

TRIM_RTOL = 1e-8


class CalderonError(RuntimeError):
    pass


class DirectSumError(CalderonError):
    def __init__(self, smin: float):
        super().__init__(
            f"direct-sum failure (relative smallest singular value {smin:.2e}), increase M_K or |rho| resolution"
        )
        self.smin = smin


# --------------------------------------------------------------------------
# frequency pairs including xi = 0


def pair_for(xi, beta: float) -> FrequencyPair:
    """:func:`make_frequency_pair`, extended to ``xi = 0`` by ``rho2 = -rho1``."""
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(xi) > 0:
        return make_frequency_pair(xi, beta)
    if beta <= 0:
        raise FrequencyError("xi = 0 needs beta > 0")
    e2, e3 = np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])
    r1 = ComplexFrequency(beta * e2, beta * e3)
    return FrequencyPair(r1, -r1, xi, float(beta))


def pair_of_modulus(xi, rho_abs: float) -> FrequencyPair:
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(xi) > 0:
        return make_frequency_pair(xi, beta_for_modulus(xi, rho_abs))
    return pair_for(xi, rho_abs / math.sqrt(2))


# --------------------------------------------------------------------------
# kernel basis


def source_layout(mesh: BoundaryMesh, count: int = 200, min_gap: int = 4) -> np.ndarray:
    """Grid-node source points inside the cube, biased toward its boundary.

    Points are taken from nested cube shells (half-widths ``m - min_gap``,
    ``m - min_gap - 2``, ...) sampled on coarse sublattices, closest shells
    first, until ``count`` points are collected.  Returns physical
    coordinates, shape ``(count, n)``.
    """
    g = mesh.grid
    m = mesh.m
    n = g.n
    pts: list[tuple] = []
    seen = set()
    s = m - min_gap
    if s < 1:
        raise CalderonError("cube too small for sources at the required distance from the boundary")
    while s >= 1 and len(pts) < count:
        k = max(1, math.ceil(2 * s / math.ceil((count / (2 * n)) ** (1 / (n - 1)))))
        # sublattice with step dividing 2s as evenly as possible
        ticks = np.unique(np.round(np.linspace(-s, s, 2 * s // k + 1)).astype(int))
        grid_pts = np.stack(np.meshgrid(*([ticks] * n), indexing="ij"), -1).reshape(-1, n)
        shell = grid_pts[np.max(np.abs(grid_pts), axis=1) == s]
        for p in map(tuple, shell):
            if p not in seen:
                seen.add(p)
                pts.append(p)
        s -= 2
    if len(pts) < count:
        raise CalderonError(f"only {len(pts)} source nodes available, {count} requested")
    arr = np.array(pts[:count], dtype=int)
    return arr * g.h


@dataclass(eq=False)
class KernelBasis:
    K: np.ndarray  # 2M x M_K (after trimming)
    sources: np.ndarray
    rho: ComplexFrequency
    singular_values: np.ndarray
    raw: np.ndarray  # untrimmed column matrix


def point_source_pairs(mesh: BoundaryMesh, rho: ComplexFrequency, sources: np.ndarray, shift=CGO_SHIFT) -> tuple[np.ndarray, np.ndarray]:
    """Nodal Dirichlet and Neumann values of ``G_rho(x - y_i)`` (columns over sources)."""
    g = mesh.grid
    m = mesh.m
    sidx = np.rint(np.asarray(sources) / g.h).astype(int)
    if np.any(np.abs(sidx) > m - 4):
        raise CalderonError("sources must be at least 4h inside the boundary")
    table = faddeev_kernel_table(rho, g, shift=shift)
    bidx = mesh.index - g.N // 2
    D = np.empty((mesh.size, len(sidx)), dtype=complex)
    Nn = np.empty_like(D)
    for i, y in enumerate(sidx):
        off = bidx - y
        val, grad = table.green(off)
        D[:, i] = val
        Nn[:, i] = np.sum(grad * mesh.normals, axis=1)
    return D, Nn


def sample_kernel_basis(
    rho: ComplexFrequency,
    mesh: BoundaryMesh,
    sources: np.ndarray | None = None,
    count: int = 200,
    shift=CGO_SHIFT,
    max_rank: int | None = None,
) -> KernelBasis:
    """Projected Cauchy pairs of interior point sources, orthonormalised by SVD.

    Columns with relative singular value below ``1e-8`` are dropped and at
    most ``max_rank`` (default ``M``) directions are kept.
    """
    if sources is None:
        sources = source_layout(mesh, count)
    D, Nn = point_source_pairs(mesh, rho, sources, shift)
    raw = np.vstack([mesh.project(D), mesh.project(Nn)])
    scale = np.linalg.norm(raw, axis=0)
    raw = raw / np.where(scale > 0, scale, 1.0)
    return kernel_basis_from_raw(raw, sources, rho, mesh.basis_size if max_rank is None else max_rank)


def kernel_basis_from_raw(raw: np.ndarray, sources, rho: ComplexFrequency, max_rank: int) -> KernelBasis:
    """Trim and orthonormalise normalised source columns (the cacheable part is ``raw``)."""
    U, s, _ = np.linalg.svd(raw, full_matrices=False)
    keep = min(int(np.count_nonzero(s > TRIM_RTOL * s[0])), max_rank)
    return KernelBasis(U[:, :keep], np.asarray(sources), rho, s, raw)


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between column spans."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.conj().T @ Qb, compute_uv=False)
    return np.sort(np.arccos(np.clip(s, -1.0, 1.0)))


# --------------------------------------------------------------------------
# trace recovery


@dataclass(eq=False)
class TraceRecovery:
    pair: CauchyPair
    coefficients: np.ndarray
    residual: float
    smin: float
    rank: int = 0


TSVD_RTOL = 1e-2
FIT_LIMIT = 0.5


def cgo_trace_from_data(
    cd: CauchySubspace,
    kb: KernelBasis,
    mesh: BoundaryMesh,
    rho: ComplexFrequency,
    rtol: float = TSVD_RTOL,
    fit_limit: float = FIT_LIMIT,
) -> TraceRecovery:
    """Recover the CGO trace as ``c = T e^{rho.x} - kappa`` with ``kappa`` in ``span K``.

    ``c`` must lie on the graph of the DtN map, so the kernel coefficients
    ``a`` solve ``(K_N - Lambda K_D) a = pw_N - Lambda pw_D`` in the
    truncated-SVD sense (singular values below ``rtol * s_max`` dropped).
    Truncation is what stabilises the split: the trailing point-source
    directions are nearly contained in ``CD_q``.

    Raises
    ------
    DirectSumError
        If no direction survives truncation or the graph residual of the fit
        exceeds ``fit_limit`` relative to the right-hand side.
    """
    M = mesh.basis_size
    lam = cd.dtn
    pw = plane_wave_pair(mesh, rho).coefficients()
    K = kb.raw
    A = K[M:] - lam @ K[:M]
    b = pw[M:] - lam @ pw[:M]
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    keep = s > rtol * s[0]
    rank = int(np.count_nonzero(keep))
    smin = float(s[keep][-1] / s[0]) if rank else 0.0
    if rank == 0:
        raise DirectSumError(smin)
    a = Vh[keep].conj().T @ ((U[:, keep].conj().T @ b) / s[keep])
    res = float(np.linalg.norm(A @ a - b) / np.linalg.norm(b))
    if res > fit_limit:
        raise DirectSumError(smin)
    c = pw - K @ a
    return TraceRecovery(CauchyPair.from_coefficients(mesh, c, rho.vector), c, res, smin, rank)


# --------------------------------------------------------------------------
# q^ from boundary data


def qhat_from_boundary(trace: CauchyPair, rho2: ComplexFrequency, rho1: ComplexFrequency | None = None) -> complex:
    """``int_{dOmega} (v d_n w - d_n v w)`` with ``w = e^{rho2.x}``.

    When ``rho1`` is given, the multiple ``lam`` of the plane wave
    ``e^{rho1.x}`` that best matches ``v`` (boundary least squares) is
    removed first; its exact contribution is zero because both exponentials
    are harmonic.  The result stays linear in the trace.
    """
    mesh = trace.mesh
    pts = mesh.points
    m = float(np.max(np.abs(pts @ rho2.re)))
    if m > 700:
        raise CalderonError(f"e^(rho2.x) overflows on the boundary (|Re rho2 . x| = {m:.0f})")
    w = np.exp(pts @ rho2.vector)
    dw = (mesh.normals @ rho2.vector) * w
    v, dv = trace.dirichlet, trace.neumann
    if rho1 is not None:
        e = np.exp(pts @ rho1.vector)
        de = (mesh.normals @ rho1.vector) * e
        wt = mesh.weights
        lam = np.sum(wt * np.conj(e) * v) / np.sum(wt * np.abs(e) ** 2)
        v = v - lam * e
        dv = dv - lam * de
    return surface_integral(mesh, v * dw - dv * w)


def richardson(rho_abs, values):
    """Two-point linear extrapolation in ``1/|rho|`` to ``1/|rho| = 0`` from the two largest ``|rho|``."""
    r = np.asarray(rho_abs, float)
    v = np.asarray(values, complex)
    if r.size < 2:
        return complex(v[-1])
    order = np.argsort(r)
    r1, r2 = r[order[-2]], r[order[-1]]
    v1, v2 = v[order[-2]], v[order[-1]]
    t1, t2 = 1 / r1, 1 / r2
    return complex((v2 * t1 - v1 * t2) / (t1 - t2))


# --------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionRow:
    xi: tuple
    beta: float
    rho_abs: float
    qhat: complex
    qhat_true: complex
    rel_err: float
    diag: float
    error: str = ""


@dataclass
class ReconstructionReport:
    mode: str
    rows: list = field(default_factory=list)
    extrapolated: dict = field(default_factory=dict)  # xi -> (qhat, qhat_true, rel_err)
    field: ScalarField | None = None
    seconds: float = 0.0

    def by_xi(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.xi, []).append(r)
        return out

    def median_error(self) -> float:
        errs = [e for (_, _, e) in self.extrapolated.values() if np.isfinite(e)]
        return float(np.median(errs)) if errs else math.nan


def xi_lattice(xi_max: int, step: float = 1.0, include_zero: bool = True) -> list[tuple]:
    k = np.arange(-xi_max, xi_max + 1e-9, step)
    out = [tuple(float(a) for a in p) for p in np.stack(np.meshgrid(k, k, k, indexing="ij"), -1).reshape(-1, 3)]
    if not include_zero:
        out = [p for p in out if any(p)]
    return out


def _rel(a: complex, b: complex) -> float:
    return abs(a - b) / abs(b) if abs(b) > 0 else abs(a - b)


def oracle_qhat(q: ScalarField, mesh: BoundaryMesh, pair: FrequencyPair, tol: float = 1e-10, shift=CGO_SHIFT):
    """One rung of the limit with the CGO trace computed from ``q`` directly."""
    sol = solve_corrector(q, pair.rho1, tol=tol, shift=shift)
    fld = cgo_field(sol, mesh)
    return qhat_from_boundary(fld.trace, pair.rho2, pair.rho1), sol, fld


def reconstruct(
    mesh: BoundaryMesh,
    xis,
    rho_schedule,
    mode: str = "oracle",
    q: ScalarField | None = None,
    cd: CauchySubspace | None = None,
    kernel_bases: dict | None = None,
    source_count: int = 200,
    tol: float = 1e-10,
    build_field: bool = False,
    shift=CGO_SHIFT,
) -> ReconstructionReport:
    """Recover ``q^(xi)`` over a lattice of ``xi``.

    Parameters
    ----------
    rho_schedule
        Moduli ``|rho|``; each is converted to ``beta`` per ``xi`` so that the
        pair has exactly that modulus (when feasible).
    mode
        ``"oracle"`` computes CGO traces from ``q``; ``"blind"`` recovers them
        from ``cd`` and the kernel basis.
    kernel_bases
        Optional cache ``{rho key: KernelBasis}`` shared across calls (the
        kernel does not depend on ``q``).
    """
    t0 = time.perf_counter()
    if mode not in ("oracle", "blind"):
        raise CalderonError(f"unknown mode {mode!r} (valid: oracle, blind)")
    if mode == "oracle" and q is None:
        raise CalderonError("oracle mode needs q")
    if mode == "blind" and cd is None:
        raise CalderonError("blind mode needs Cauchy data")
    kernel_bases = {} if kernel_bases is None else kernel_bases
    rep = ReconstructionReport(mode)
    for xi in xis:
        xi_t = tuple(float(a) for a in xi)
        truth = grid_fourier(q, xi_t) if q is not None else complex("nan")
        rhos, vals = [], []
        for ra in rho_schedule:
            try:
                pair = pair_of_modulus(xi_t, ra)
                defect = pair.pairing_defect
                if defect > 1e-10 * (1 + np.linalg.norm(xi_t)):
                    raise FrequencyError("pairing defect")
                if mode == "oracle":
                    if not np.any(q.values):
                        val, diag = 0j, 0.0
                    else:
                        val, sol, _ = oracle_qhat(q, mesh, pair, tol, shift)
                        diag = sol.kappa_hat
                else:
                    key = pair.rho1.key()
                    if key not in kernel_bases:
                        kernel_bases[key] = sample_kernel_basis(pair.rho1, mesh, count=source_count, shift=shift)
                    rec = cgo_trace_from_data(cd, kernel_bases[key], mesh, pair.rho1)
                    val = qhat_from_boundary(rec.pair, pair.rho2, pair.rho1)
                    diag = rec.residual
                rhos.append(pair.rho1.abs)
                vals.append(val)
                rep.rows.append(ReconstructionRow(xi_t, pair.beta, pair.rho1.abs, val, truth, _rel(val, truth), diag))
            except (SolverError, CalderonError, FrequencyError) as exc:
                rep.rows.append(ReconstructionRow(xi_t, math.nan, ra, complex("nan"), truth, math.nan, math.nan, str(exc)))
        if vals:
            ext = richardson(rhos, vals)
            rep.extrapolated[xi_t] = (ext, truth, _rel(ext, truth))
    if build_field:
        rep.field = band_limited_field(mesh.grid, rep.extrapolated, mesh.domain.a)
    rep.seconds = time.perf_counter() - t0
    return rep


def band_limited_field(grid: GridSpec, qhats: dict, a: float) -> ScalarField:
    """Inverse Fourier sum over the lattice of recovered values.

    With lattice step ``d``, the sum ``(d/2pi)^3 sum q^(xi) e^{i xi x}`` is
    the band-limited reconstruction on the period ``2pi/d``.
    """
    if not qhats:
        return ScalarField(grid, np.zeros(grid.shape))
    xis = np.array(list(qhats.keys()))
    vals = np.array([v[0] for v in qhats.values()])
    steps = [np.min(np.diff(np.unique(xis[:, d]))) if np.unique(xis[:, d]).size > 1 else 1.0 for d in range(3)]
    x = grid.coords()
    out = np.zeros(grid.shape, dtype=complex)
    for k, v in zip(xis, vals):
        if np.isfinite(v):
            out += v * np.exp(1j * sum(kk * xx for kk, xx in zip(k, x)))
    out *= np.prod(steps) / (2 * np.pi) ** 3
    return ScalarField(grid, out.real)


def band_limit_truth(q: ScalarField, xis) -> ScalarField:
    """Band-limited version of ``q`` using its exact grid Fourier values on the lattice."""
    return band_limited_field(q.grid, {tuple(x): (grid_fourier(q, x), 0, 0) for x in xis}, 0.0)


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Normalised inner product ``<a, b> / (|a| |b|)``."""
    a, b = np.ravel(a).real, np.ravel(b).real
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass
class BlindOracleRow:
    xi: tuple
    rho_abs: float
    trace_err: float
    qhat_err: float
    qhat_blind: complex
    qhat_oracle: complex
    rank: int
    fit_residual: float


def blind_vs_oracle(
    mesh: BoundaryMesh,
    q: ScalarField,
    cd: CauchySubspace,
    xis,
    rho_schedule,
    source_count: int = 200,
    shift=CGO_SHIFT,
) -> list[BlindOracleRow]:
    """Compare blind trace recovery with the oracle CGO trace for each ``(xi, |rho|)``.

    Trace discrepancies are relative Euclidean norms of the projected
    coefficient vectors.
    """
    rows = []
    for xi in xis:
        xi_t = tuple(float(a) for a in xi)
        for ra in rho_schedule:
            pair = pair_of_modulus(xi_t, ra)
            ref, _, fld = oracle_qhat(q, mesh, pair, shift=shift)
            kb = sample_kernel_basis(pair.rho1, mesh, count=source_count, shift=shift)
            rec = cgo_trace_from_data(cd, kb, mesh, pair.rho1)
            oc = fld.trace.coefficients()
            val = qhat_from_boundary(rec.pair, pair.rho2, pair.rho1)
            rows.append(
                BlindOracleRow(
                    xi_t,
                    pair.rho1.abs,
                    float(np.linalg.norm(rec.coefficients - oc) / np.linalg.norm(oc)),
                    _rel(val, ref),
                    val,
                    ref,
                    rec.rank,
                    rec.residual,
                )
            )
    return rows


# --------------------------------------------------------------------------
# projector structure (validation path)


@dataclass(eq=False)
class ProjectorReport:
    """Idempotency and subspace checks of an assembled ``A_0``."""

    defect: float
    range_angles: np.ndarray
    kernel_angles: np.ndarray
    gap: tuple  # singular values M-1 and M of A_0 (relative to the largest)
    reference: str
    seconds: float = 0.0


def reference_dtn(mesh: BoundaryMesh, reference: str = "richardson") -> np.ndarray:
    """Free-space (``q = 0``) DtN matrix used as the ``CD_0`` reference.

    ``"fd"`` is the finite-difference DtN on ``mesh``; ``"richardson"``
    combines it with the DtN on the twice finer grid as ``2 L_{h/2} - L_h``,
    removing the first-order error that edge and corner data leave in the
    one-sided flux.
    """
    from .forward import dtn_matrix

    coarse = dtn_matrix(mesh)
    if reference == "fd":
        return coarse
    if reference != "richardson":
        raise CalderonError(f"unknown reference {reference!r} (valid: fd, richardson)")
    g = mesh.grid
    fine_mesh = BoundaryMesh(GridSpec(g.n, g.L, 2 * g.N), DomainSpec(mesh.domain.a, mesh.domain.w), mesh.degree, mesh.basis_kind)
    return 2 * dtn_matrix(fine_mesh) - coarse


def projector_structure(ops: LayerOperators, kernel: KernelBasis, dtn0: np.ndarray, reference: str = "richardson") -> ProjectorReport:
    """Check that ``-A_0`` is a projector onto ``CD_0`` whose kernel is the sampled exterior data."""
    t0 = time.perf_counter()
    M = ops.mesh.basis_size
    C0 = np.vstack([np.eye(M), dtn0]).astype(complex)
    s = np.linalg.svd(ops.A0, compute_uv=False)
    return ProjectorReport(
        ops.projector_defect(),
        principal_angles(ops.range_basis(), C0),
        principal_angles(ops.kernel_basis(), kernel.K),
        (float(s[M - 1] / s[0]), float(s[M] / s[0])),
        reference,
        time.perf_counter() - t0,
    )
