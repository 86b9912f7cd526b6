"""Complex frequencies, the conjugated Laplacian and Faddeev's Green operator.

The Green operator ``G_rho`` inverts ``Delta_rho = Delta + 2 rho . grad``
whose symbol is ``p_rho(zeta) = -|zeta|^2 + 2i rho . zeta``.  On the torus it
is a Fourier multiplier; lattice modes on (or numerically on) the
characteristic set ``p_rho = 0`` are zeroed and counted.

A Bloch shift of half a lattice cell moves the lattice off ``zeta = 0`` and
off ``zeta = xi`` for integer ``xi``, both of which lie on the characteristic
set of every frequency produced by :func:`make_frequency_pair`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import BlochTwist, DomainSpec, GridSpec, ScalarField

DEFAULT_EPS_CHAR = 1e-6


class FrequencyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ComplexFrequency:
    """``rho = re + i im`` in C^n with ``rho . rho = 0``."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=float).copy()
        im = np.asarray(self.im, dtype=float).copy()
        re.setflags(write=False)
        im.setflags(write=False)
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)
        r2 = re @ re + im @ im
        if abs(self.dot_self) > 1e-10 * max(r2, 1e-300):
            raise FrequencyError(f"rho.rho = {self.dot_self:.3e} is not zero")

    @classmethod
    def from_complex(cls, rho) -> "ComplexFrequency":
        rho = np.asarray(rho, dtype=complex)
        return cls(rho.real, rho.imag)

    @property
    def vector(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def dot_self(self) -> complex:
        v = self.re + 1j * self.im
        return complex(v @ v)

    @property
    def abs(self) -> float:
        return float(math.sqrt(self.re @ self.re + self.im @ self.im))

    def conj(self) -> "ComplexFrequency":
        return ComplexFrequency(self.re, -self.im)

    def __neg__(self) -> "ComplexFrequency":
        return ComplexFrequency(-self.re, -self.im)

    def key(self) -> tuple:
        return tuple(np.round(np.concatenate([self.re, self.im]), 12))


@dataclass(frozen=True, eq=False)
class FrequencyPair:
    rho1: ComplexFrequency
    rho2: ComplexFrequency
    xi: np.ndarray
    beta: float

    @property
    def pairing_defect(self) -> float:
        s = self.rho1.vector + self.rho2.vector + 1j * self.xi
        return float(np.linalg.norm(s))


def _orthonormal_frame(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    e1 = xi / np.linalg.norm(xi)
    for cand in np.eye(3):
        v = cand - (cand @ e1) * e1
        if np.linalg.norm(v) >= 0.5:
            break
    e2 = v / np.linalg.norm(v)
    e3 = np.cross(e1, e2)
    return e1, e2, e3


def make_frequency_pair(xi, beta: float) -> FrequencyPair:
    """Two frequencies with ``rho_j . rho_j = 0`` and ``rho1 + rho2 = -i xi``.

    With an orthonormal frame ``e1 = xi/|xi|, e2, e3 = e1 x e2`` and
    ``alpha = sqrt(|xi|^2/4 + beta^2)``::

        rho1 =  alpha e2 + i(-xi/2 + beta e3)
        rho2 = -alpha e2 + i(-xi/2 - beta e3)

    ``e2`` is the normalised projection of the first coordinate axis that is
    not too close to ``xi`` (x-axis first), so the result is deterministic.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (3,):
        raise FrequencyError("xi must be a 3-vector")
    if not np.linalg.norm(xi) > 0:
        raise FrequencyError("xi must be nonzero")
    if beta < 0:
        raise FrequencyError("beta must be non-negative")
    _, e2, e3 = _orthonormal_frame(xi)
    alpha = math.sqrt(xi @ xi / 4 + beta**2)
    rho1 = ComplexFrequency(alpha * e2, -xi / 2 + beta * e3)
    rho2 = ComplexFrequency(-alpha * e2, -xi / 2 - beta * e3)
    pair = FrequencyPair(rho1, rho2, xi, float(beta))
    if pair.pairing_defect > 1e-10 * (1 + np.linalg.norm(xi)):
        raise FrequencyError("frequency pairing failed")
    return pair


def beta_for_modulus(xi, rho_abs: float) -> float:
    """``beta`` giving ``|rho1| = rho_abs`` (0 if that is below ``|xi|/sqrt 2``)."""
    xi = np.asarray(xi, dtype=float)
    b2 = rho_abs**2 / 2 - xi @ xi / 4
    return math.sqrt(b2) if b2 > 0 else 0.0


def frequency_of_modulus(rho_abs: float, direction=(1.0, 0.0, 0.0)) -> ComplexFrequency:
    """A frequency of given modulus, taken as ``rho1`` of a pair with ``xi = direction``."""
    xi = np.asarray(direction, dtype=float)
    return make_frequency_pair(xi, beta_for_modulus(xi, rho_abs)).rho1


# Candidate Bloch shifts (lattice units) tried by :func:`best_shift`.
SHIFT_CANDIDATES = (
    (0.5, 0.5, 0.5),
    (0.5, 0.25, 0.75),
    (0.3, 0.6, 0.45),
    (0.25, 0.5, 0.5),
    (0.75, 0.35, 0.15),
    (0.15, 0.8, 0.6),
)


def best_shift(grid: GridSpec, rho: ComplexFrequency, candidates=SHIFT_CANDIDATES) -> tuple:
    """The candidate shift keeping the lattice farthest from ``p_rho = 0``.

    Any shift gives a valid quasi-periodic corrector; a lattice point close
    to the characteristic set inflates ``||G_rho||`` without bound in
    ``|rho|``, so the shift with the largest ``min |p_rho|`` is used.
    Deterministic: ties resolve to the earliest candidate.
    """
    best, best_val = None, -1.0
    for c in candidates:
        c = tuple(c[: grid.n])
        v = float(np.min(np.abs(symbol(grid, rho, c))))
        if v > best_val * (1 + 1e-9):
            best, best_val = c, v
    return best


def resolve_shift(grid: GridSpec, rho: ComplexFrequency, shift):
    """``"auto"`` becomes :func:`best_shift`; anything else passes through."""
    if isinstance(shift, str):
        if shift != "auto":
            raise FrequencyError(f"unknown shift {shift!r}")
        return best_shift(grid, rho)
    return shift


def symbol(grid: GridSpec, rho: ComplexFrequency, shift=None) -> np.ndarray:
    """``p_rho(zeta) = -|zeta|^2 + 2i rho . zeta`` on the (shifted) lattice."""
    twist = BlochTwist(grid, shift)
    z = grid.zeta(twist.theta)
    r = rho.vector
    return -sum(zj**2 for zj in z) + 2j * sum(r[d] * z[d] for d in range(grid.n))


class FaddeevOperator:
    """Fourier-multiplier realisation of ``G_rho`` on a grid.

    Modes with ``|p_rho| < eps_char * max(1, |rho|)`` are set to zero; their
    number is ``char_count``.  Instances are immutable after construction.
    """

    def __init__(self, grid: GridSpec, rho: ComplexFrequency, eps_char: float = DEFAULT_EPS_CHAR, shift=None):
        if grid.n != rho.re.size:
            raise FrequencyError("frequency and grid dimension differ")
        self.grid = grid
        self.rho = rho
        self.eps_char = eps_char
        shift = resolve_shift(grid, rho, shift)
        self.shift = shift
        self.twist = BlochTwist(grid, shift)
        p = symbol(grid, rho, shift)
        small = np.abs(p) < eps_char * max(1.0, rho.abs)
        self.char_count = int(np.count_nonzero(small))
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(small, 0.0, 1.0 / np.where(small, 1.0, p))
        m.setflags(write=False)
        self.multiplier = m

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.twist.apply_multiplier(values, self.multiplier)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        return self.twist.apply_multiplier(values, self.multiplier.conj())

    def apply_conjugated_laplacian(self, values: np.ndarray) -> np.ndarray:
        """Spectral ``Delta + 2 rho . grad`` with the same lattice."""
        p = symbol(self.grid, self.rho, self.shift)
        return self.twist.apply_multiplier(values, p)

    def gradient(self, values: np.ndarray) -> list[np.ndarray]:
        z = self.grid.zeta(self.twist.theta)
        F = self.twist.forward(values)
        return [self.twist.inverse(1j * zj * F) for zj in z]


def apply_G_rho(f: ScalarField, rho: ComplexFrequency, eps_char: float = DEFAULT_EPS_CHAR, shift=None):
    """Apply ``G_rho``; returns ``(field, characteristic_count)``."""
    op = FaddeevOperator(f.grid, rho, eps_char, shift)
    return ScalarField(f.grid, op(f.values)), op.char_count


# --------------------------------------------------------------------------
# kernel tables


class KernelTable:
    """Tabulated Faddeev kernel ``g_rho`` and its gradient on grid offsets.

    ``g_rho = F^{-1}[1/p_rho]`` so that ``(G_rho f)(x) = sum_y g(x - y) f(y) h^n``.
    The full Green function is ``G(x, y) = e^{rho.(x-y)} g_rho(x - y)``.
    Lookups at integer offsets are exact (the Bloch phase is applied to the
    unwrapped offset); off-node queries use multilinear interpolation.
    """

    def __init__(self, op: FaddeevOperator):
        g = op.grid
        self.grid = g
        self.rho = op.rho
        self.theta = op.twist.theta
        self.char_count = op.char_count
        inv = 1.0 / g.cell_volume
        m = op.multiplier
        self.table = np.fft.ifftn(m) * inv
        z = g.zeta(self.theta)
        self.grad_table = [np.fft.ifftn(1j * zj * m) * inv for zj in z]
        for t in [self.table, *self.grad_table]:
            t.setflags(write=False)

    def _check(self, offsets: np.ndarray) -> None:
        lim = self.grid.N // 2
        if np.any(np.abs(offsets) > lim):
            raise FrequencyError("kernel query outside the safe box (separation beyond L)")

    def _lookup(self, table: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        offsets = np.asarray(offsets, dtype=np.int64)
        self._check(offsets)
        N = self.grid.N
        vals = table[tuple((offsets % N).T)]
        if np.any(self.theta):
            vals = vals * np.exp(1j * (offsets * self.grid.h) @ self.theta)
        return vals

    def g(self, offsets: np.ndarray) -> np.ndarray:
        """``g_rho`` at integer grid offsets (shape ``(k, n)``)."""
        return self._lookup(self.table, offsets)

    def grad_g(self, offsets: np.ndarray) -> np.ndarray:
        return np.stack([self._lookup(t, offsets) for t in self.grad_table], axis=-1)

    def green(self, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``G(z)`` and ``grad_z G(z)`` for ``z = offsets * h``."""
        z = np.asarray(offsets) * self.grid.h
        e = np.exp(z @ self.rho.vector)
        gv = self.g(offsets)
        grad = self.grad_g(offsets) + self.rho.vector * gv[:, None]
        return e * gv, e[:, None] * grad

    def interpolate(self, z: np.ndarray) -> np.ndarray:
        """``g_rho`` at arbitrary offsets ``z`` (physical units), multilinear."""
        from .kernels import multilinear

        z = np.atleast_2d(np.asarray(z, dtype=float))
        h = self.grid.h
        if np.any(np.abs(z) > self.grid.L + 1e-12):
            raise FrequencyError("kernel query outside the safe box (separation beyond L)")
        # interpolate the periodic part, then restore the Bloch phase
        base = np.fft.fftshift(self.table)
        vals = multilinear(base, -self.grid.L, h, z)
        if np.any(self.theta):
            vals = vals * np.exp(1j * z @ self.theta)
        return vals


@lru_cache(maxsize=16)
def _cached_table(grid: GridSpec, rho_key: tuple, eps_char: float, shift: tuple | None) -> KernelTable:
    n = grid.n
    rho = ComplexFrequency(np.array(rho_key[:n]), np.array(rho_key[n:]))
    return KernelTable(FaddeevOperator(grid, rho, eps_char, shift))


def faddeev_kernel_table(rho: ComplexFrequency, grid: GridSpec, eps_char: float = DEFAULT_EPS_CHAR, shift=None) -> KernelTable:
    """Kernel table for ``(rho, grid)``, cached read-only per key."""
    shift = resolve_shift(grid, rho, shift)
    key = None if shift is None else tuple(np.broadcast_to(np.asarray(shift, float), (grid.n,)))
    return _cached_table(grid, rho.key(), eps_char, key)


# --------------------------------------------------------------------------
# norm probe


def random_test_fields(grid: GridSpec, domain: DomainSpec, count: int, rng: np.random.Generator, corr: float | None = None):
    """Smooth random fields supported in ``domain`` (Gaussian-filtered noise times a bump)."""
    corr = corr if corr is not None else domain.a / 4
    x = grid.coords()
    r = np.sqrt(sum(xi**2 for xi in x)) / (domain.a * 0.9)
    window = np.where(r < 1, (1 - np.minimum(r, 1) ** 2) ** 3, 0.0)
    k2 = sum(z**2 for z in grid.zeta())
    filt = np.exp(-0.5 * corr**2 * k2)
    out = []
    for _ in range(count):
        w = rng.standard_normal(grid.shape)
        f = np.fft.ifftn(np.fft.fftn(w) * filt).real * window
        out.append(f / np.sqrt(np.sum(f**2) * grid.cell_volume))
    return out


@dataclass
class NormProbeRow:
    rho_abs: float
    norm_est: float
    char_count: int


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def operator_norm_probe(
    grid: GridSpec,
    domain: DomainSpec,
    rhos: list[ComplexFrequency],
    trials: int = 5,
    seed: int = 0,
    shift=0.5,
    eps_char: float = DEFAULT_EPS_CHAR,
):
    """Empirical ``max_f ||G_rho f||_2 / ||f||_2`` over random test fields.

    Returns the table rows and the fitted log-log slope against ``|rho|``.
    """
    if len(rhos) < 2:
        raise ValueError("need at least two frequencies")
    if trials < 5:
        raise ValueError("need at least five trials")
    domain.check(grid)
    rng = np.random.default_rng(seed)
    fields = random_test_fields(grid, domain, trials, rng)
    rows = []
    for rho in rhos:
        op = FaddeevOperator(grid, rho, eps_char, shift)
        ratios = [np.linalg.norm(op(f)) / np.linalg.norm(f) for f in fields]
        rows.append(NormProbeRow(rho.abs, float(max(ratios)), op.char_count))
    slope = loglog_slope([r.rho_abs for r in rows], [r.norm_est for r in rows])
    return rows, slope
