import numpy as np
import pytest

from clab.cgo import (
    SolverError,
    cgo_field,
    corrector_decay_study,
    dense_corrector,
    grid_fourier,
    identity_check,
    interior_residual,
    plane_wave_pair,
    solve_corrector,
)
from clab.faddeev import FaddeevOperator, beta_for_modulus, frequency_of_modulus, make_frequency_pair
from clab.grid import BoundaryMesh, boundary_values, DomainSpec, GridSpec, ScalarField
from clab.potentials import Amplitude, BumpPotentialSpec, ConormalPotentialSpec, SubmanifoldSpec, sample_potential

G32 = GridSpec(3, 0.5, 32)
D32 = DomainSpec(0.25, 1 / 32)
XI = np.array([2.0, 0.0, 0.0])


def _conormal(grid=G32, domain=D32, scale=3.0):
    spec = ConormalPotentialSpec(SubmanifoldSpec("sphere", radius=0.1), 0.8, Amplitude(scale, (0, 0, 0), 0.2))
    return sample_potential(spec, grid, domain).field


def _bump(grid, scale=20.0, domain=None):
    return sample_potential(BumpPotentialSpec(scale, (0, 0, 0), 0.06, 0.2), grid, domain).field


def _rho(m, xi=XI):
    return make_frequency_pair(xi, beta_for_modulus(xi, m)).rho1


def test_zero_potential_gives_zero_corrector():
    q = ScalarField(G32, np.zeros(G32.shape))
    sol = solve_corrector(q, _rho(16))
    assert sol.iterations == 0
    assert not np.any(sol.psi.values)


@pytest.fixture(scope="module")
def oracle_case():
    g = GridSpec(3, 0.5, 16)
    q = _bump(g)
    rho = make_frequency_pair([1, 0, 0], 2.0).rho1
    return q, rho, solve_corrector(q, rho, tol=1e-12)


def test_matches_dense_direct_solve(oracle_case):
    q, rho, sol = oracle_case
    ref = dense_corrector(q, rho, shift=sol.shift)
    assert np.linalg.norm(sol.psi.values - ref) / np.linalg.norm(ref) < 1e-6


def test_fixed_point_agrees_with_krylov(oracle_case):
    q, rho, sol = oracle_case
    fp = solve_corrector(q, rho, tol=1e-12, method="fixed", max_iter=500)
    assert sol.kappa_hat < 1
    assert np.linalg.norm(fp.psi.values - sol.psi.values) / np.linalg.norm(sol.psi.values) < 1e-9


def test_interior_residual_oracle_case(oracle_case):
    q, _, sol = oracle_case
    assert interior_residual(sol, q, 0.25) < 10 * 1e-12


def test_solution_records_residual_below_tolerance():
    sol = solve_corrector(_conormal(), _rho(16), tol=1e-9)
    assert sol.residual < 1e-8
    assert sol.char_count == 0


def test_conormal_contraction_at_rho_32():
    sol = solve_corrector(_conormal(), _rho(32))
    assert sol.kappa_hat < 0.5
    assert sol.iterations <= 30


def test_linearity_to_first_order():
    q = _bump(G32, 20.0, D32)
    rho = _rho(16)
    sol = solve_corrector(q, rho, tol=1e-12)
    psi1 = -FaddeevOperator(G32, rho, shift=sol.shift)(q.values.astype(complex))  # linearised corrector
    defects = []
    for a in (0.1, 0.05):
        psi_a = solve_corrector(ScalarField(G32, a * q.values), rho, tol=1e-12).psi.values
        defects.append(np.linalg.norm(psi_a - a * psi1))
    # second order: halving alpha divides the defect by about four
    assert 3.0 < defects[0] / defects[1] < 5.0


def test_conjugation_identity_on_random_modes(rng):
    g = GridSpec(3, np.pi, 16)  # integer lattice
    rho = frequency_of_modulus(3.0, (0.2, 1.0, 0.5))
    op = FaddeevOperator(g, rho, shift=None)
    x = g.coords()
    w = np.zeros(g.shape, complex)
    expected = np.zeros(g.shape, complex)
    for _ in range(6):
        zeta = rng.integers(-4, 5, 3)
        c = rng.standard_normal() + 1j * rng.standard_normal()
        wave = c * np.exp(1j * sum(z * xi for z, xi in zip(zeta, x)))
        k = rho.vector + 1j * zeta  # e^{rho.x} w is a sum of e^{k.x}, and Delta e^{k.x} = (k.k) e^{k.x}
        w += wave
        expected += (k @ k) * wave
    out = op.apply_conjugated_laplacian(w)
    assert np.linalg.norm(out - expected) < 1e-8 * np.linalg.norm(expected)


def test_non_convergence_reports_kappa():
    q = _conormal(scale=3000.0)
    with pytest.raises(SolverError) as err:
        solve_corrector(q, _rho(8), max_iter=5, method="fixed")
    assert err.value.kappa_hat is not None and err.value.kappa_hat >= 1


def test_unresolved_frequency_rejected():
    with pytest.raises(SolverError):
        solve_corrector(_conormal(), _rho(80))


def test_complex_potential_rejected():
    q = _conormal()
    with pytest.raises(ValueError):
        solve_corrector(ScalarField(G32, q.values + 1j), _rho(8))


# --------------------------------------------------------------------------
# the field v


def test_plane_wave_field_when_psi_vanishes(mesh24):
    g = mesh24.grid
    rho = _rho(8)
    sol = solve_corrector(ScalarField(g, np.zeros(g.shape)), rho)
    tr = cgo_field(sol, mesh24).trace
    ref = plane_wave_pair(mesh24, rho)
    np.testing.assert_allclose(tr.dirichlet, np.exp(mesh24.points @ rho.vector), rtol=1e-14)
    np.testing.assert_allclose(tr.dirichlet, ref.dirichlet, rtol=1e-14)
    np.testing.assert_allclose(tr.neumann, ref.neumann, rtol=1e-14)
    # e^{rho.x} is harmonic because rho.rho = 0: Delta e^{rho.x} = (rho.rho) e^{rho.x}
    assert abs(rho.dot_self) < 1e-10 * rho.abs**2


def test_trace_equals_field_on_boundary_nodes(mesh24):
    g = mesh24.grid
    q = _bump(g, 20.0, DomainSpec(0.25, 0.0))
    sol = solve_corrector(q, _rho(8))
    fld = cgo_field(sol, mesh24)
    full = fld.values_in(np.ones(g.shape, bool)).reshape(g.shape)
    np.testing.assert_allclose(fld.trace.dirichlet, boundary_values(mesh24, full), rtol=1e-12)


def test_overflow_guard():
    g = GridSpec(3, 8.0, 16)
    mesh = BoundaryMesh(g, DomainSpec(4.0), 2)
    with pytest.raises(SolverError):
        plane_wave_pair(mesh, frequency_of_modulus(400.0, (0, 0, 1)))


# --------------------------------------------------------------------------
# studies


def test_decay_study_zero_potential():
    q = ScalarField(G32, np.zeros(G32.shape))
    rows, _ = corrector_decay_study(q, XI, [beta_for_modulus(XI, m) for m in (8, 16, 32)])
    assert all(r.psi_l2 == 0 and r.psi_lp == 0 for r in rows)


def test_decay_study_needs_three_betas():
    with pytest.raises(ValueError):
        corrector_decay_study(_conormal(), XI, [1.0, 2.0])


def test_decay_study_smooth_bump_slope():
    q = sample_potential(BumpPotentialSpec(50.0, (0, 0, 0), 0.05, 0.2), G32, D32).field
    rows, slope = corrector_decay_study(q, XI, [beta_for_modulus(XI, m) for m in (8, 16, 32, 64)])
    assert slope <= -0.8
    norms = [r.psi_l2 for r in rows]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_decay_study_conormal_monotone():
    rows, slope = corrector_decay_study(_conormal(), XI, [beta_for_modulus(XI, m) for m in (8, 16, 32, 64)])
    assert slope < -0.3
    norms = [r.psi_l2 for r in rows]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_identity_equal_potentials_vanish():
    q = _conormal()
    rows = identity_check(q, q, XI, [1.0, 5.0])
    assert all(r.remainder == 0 and r.discrepancy == 0 for r in rows)


def test_identity_remainder_halves_per_doubling():
    q = _conormal()
    zero = ScalarField(G32, np.zeros(G32.shape))
    rows = identity_check(q, zero, XI, [beta_for_modulus(XI, m) for m in (8, 16, 32)])
    rem = [abs(r.remainder) for r in rows]
    assert all(a >= 2 * b for a, b in zip(rem, rem[1:]))
    qhat = grid_fourier(q, XI)
    assert abs(rows[-1].pairing - qhat) / abs(qhat) < 0.05
