import math

import numpy as np
import pytest

from clab.faddeev import (
    ComplexFrequency,
    FaddeevOperator,
    FrequencyError,
    apply_G_rho,
    beta_for_modulus,
    best_shift,
    faddeev_kernel_table,
    frequency_of_modulus,
    make_frequency_pair,
    operator_norm_probe,
    random_test_fields,
    symbol,
)
from clab.grid import DomainSpec, GridSpec, ScalarField, spectral_gradient, spectral_laplacian

PI_GRID = GridSpec(3, math.pi, 16)  # integer wavenumbers


def _plane_wave(grid, zeta):
    x = grid.coords()
    return ScalarField(grid, np.exp(1j * sum(z * xi for z, xi in zip(zeta, x))))


# --------------------------------------------------------------------------
# frequency algebra


def test_pair_example_xi_x_beta_3():
    pair = make_frequency_pair([1, 0, 0], 3.0)
    alpha = math.sqrt(9.25)
    assert abs(alpha - 3.04138) < 1e-5
    assert abs(np.linalg.norm(pair.rho1.re) - alpha) < 1e-12
    assert abs(pair.rho1.dot_self) < 1e-12
    assert abs(pair.rho2.dot_self) < 1e-12
    np.testing.assert_allclose(pair.rho1.vector + pair.rho2.vector, [-1j, 0, 0], atol=1e-12)


def test_pair_beta_zero_modulus():
    pair = make_frequency_pair([0, 2, 0], 0.0)
    assert abs(np.linalg.norm(pair.rho1.re) - 1.0) < 1e-12
    assert abs(np.linalg.norm(pair.rho1.im) - 1.0) < 1e-12
    assert abs(pair.rho1.abs - math.sqrt(2)) < 1e-12


def test_pair_tie_break_is_deterministic():
    a = make_frequency_pair([0, 0, 5], 2.0)
    b = make_frequency_pair([0, 0, 5], 2.0)
    np.testing.assert_array_equal(a.rho1.re, b.rho1.re)
    np.testing.assert_array_equal(a.rho1.im, b.rho1.im)
    np.testing.assert_allclose(a.rho1.re / np.linalg.norm(a.rho1.re), [1, 0, 0], atol=1e-15)


@pytest.mark.parametrize("xi", [(1, 0, 0), (0.3, -2.0, 1.1), (0, 0, 5), (3, 3, 3)])
@pytest.mark.parametrize("beta", [0.0, 0.7, 10.0, 45.0])
def test_pair_invariants(xi, beta):
    pair = make_frequency_pair(xi, beta)
    for r in (pair.rho1, pair.rho2):
        assert abs(r.dot_self) < 1e-10 * r.abs**2
    assert pair.pairing_defect < 1e-10 * (1 + np.linalg.norm(xi))
    assert abs(pair.rho1.abs - pair.rho2.abs) < 1e-12 * pair.rho1.abs


def test_zero_xi_rejected():
    with pytest.raises(FrequencyError):
        make_frequency_pair([0, 0, 0], 1.0)


def test_non_null_frequency_rejected():
    with pytest.raises(FrequencyError):
        ComplexFrequency([1.0, 0, 0], [1.0, 0, 0])


def test_modulus_helpers():
    xi = np.array([2.0, 0, 0])
    for m in (8.0, 16.0, 64.0):
        assert abs(make_frequency_pair(xi, beta_for_modulus(xi, m)).rho1.abs - m) < 1e-12
        assert abs(frequency_of_modulus(m).abs - m) < 1e-12


# --------------------------------------------------------------------------
# G_rho


def test_diagonal_action_on_plane_wave():
    rho = make_frequency_pair([1, 0, 0], 3.0).rho1
    f = _plane_wave(PI_GRID, (0, 1, 0))
    out, _ = apply_G_rho(f, rho)
    alpha = math.sqrt(9.25)
    np.testing.assert_allclose(out.values, f.values / (-1 + 2j * alpha), rtol=1e-12, atol=1e-14)
    assert abs(2 * alpha - 6.08276) < 1e-5


def test_characteristic_mode_zeroed_and_counted():
    rho = make_frequency_pair([1, 0, 0], 3.0).rho1
    f = _plane_wave(PI_GRID, (1, 0, 0))
    out, count = apply_G_rho(f, rho)
    assert np.max(np.abs(out.values)) < 1e-12
    assert count >= 1  # the field's own mode; other lattice modes may also be zeroed
    assert abs(symbol(PI_GRID, rho)[1, 0, 0]) < 1e-12


def test_zero_field_maps_to_zero():
    rho = frequency_of_modulus(5.0)
    out, _ = apply_G_rho(ScalarField(PI_GRID, np.zeros(PI_GRID.shape)), rho)
    assert not np.any(out.values)


def test_inverse_property_on_supported_field(rng):
    g, d = GridSpec(3, 0.5, 32), DomainSpec(0.25, 1 / 16)
    f = random_test_fields(g, d, 1, rng)[0]
    rho = frequency_of_modulus(20.0, (0.3, 1.0, -0.2))
    for shift in (0.5, "auto"):
        op = FaddeevOperator(g, rho, shift=shift)
        assert op.char_count == 0
        back = op.apply_conjugated_laplacian(op(f.astype(complex)))
        assert np.linalg.norm(back - f) / np.linalg.norm(f) < 1e-8


def test_best_shift_avoids_characteristic_set():
    g = GridSpec(3, 0.5, 32)
    rho = make_frequency_pair([2, 0, 0], 10.0).rho1
    s = best_shift(g, rho)
    assert np.min(np.abs(symbol(g, rho, s))) > np.min(np.abs(symbol(g, rho, None)))
    assert FaddeevOperator(g, rho, shift=s).char_count == 0


# --------------------------------------------------------------------------
# norm probe


def test_single_mode_ratio_is_inverse_symbol():
    rho = make_frequency_pair([1, 0, 0], 3.0).rho1
    zeta = (2, -1, 3)
    f = _plane_wave(PI_GRID, zeta)
    out, _ = apply_G_rho(f, rho)
    p = -np.dot(zeta, zeta) + 2j * np.dot(rho.vector, zeta)
    assert abs(out.norm() / f.norm() - 1 / abs(p)) < 1e-12 / abs(p)


def test_norm_probe_slope_and_monotonicity():
    g, d = GridSpec(3, 0.5, 32), DomainSpec(0.25, 1 / 16)
    rows, slope = operator_norm_probe(g, d, [frequency_of_modulus(r) for r in (8, 16, 32)], trials=5, seed=0)
    assert -1.2 <= slope <= -0.8
    norms = [r.norm_est for r in rows]
    assert norms[0] > norms[1] > norms[2]


def test_norm_probe_preconditions():
    g, d = GridSpec(3, 0.5, 16), DomainSpec(0.25, 1 / 8)
    with pytest.raises(ValueError):
        operator_norm_probe(g, d, [frequency_of_modulus(8)], trials=5)
    with pytest.raises(ValueError):
        operator_norm_probe(g, d, [frequency_of_modulus(8), frequency_of_modulus(16)], trials=4)


# --------------------------------------------------------------------------
# kernel table


def test_kernel_delta_consistency():
    g = GridSpec(3, 0.5, 24)
    rho = frequency_of_modulus(12.0, (0.4, 1.0, 0.3))
    op = FaddeevOperator(g, rho, shift=None)
    kt = faddeev_kernel_table(rho, g, shift=None)
    tab = ScalarField(g, np.array(kt.table))
    grads = spectral_gradient(tab.values, g)
    out = spectral_laplacian(tab).values + 2 * sum(r * gd for r, gd in zip(rho.vector, grads))
    spike = 1 / g.cell_volume
    # zeta = 0 is always characteristic on the plain lattice; zeroed modes leave their share
    removed = np.fft.ifftn((op.multiplier == 0).astype(float)) * spike
    assert op.char_count >= 1
    expected = -removed
    expected[0, 0, 0] += spike
    assert np.max(np.abs(out - expected)) < 1e-8 * spike
    assert np.max(np.abs(removed)) < 1e-3 * spike


def test_kernel_conjugation_symmetry():
    g = GridSpec(3, 0.5, 16)
    rho = frequency_of_modulus(10.0, (1.0, 0.5, 0.0))
    t = faddeev_kernel_table(rho, g, shift=0.5)
    t_bar = faddeev_kernel_table(rho.conj(), g, shift=0.5)
    t_negbar = faddeev_kernel_table(-rho.conj(), g, shift=0.5)
    offs = np.array([[1, 0, 0], [2, -3, 1], [0, 4, -2], [-5, 1, 3], [0, 0, 0]])
    np.testing.assert_allclose(np.conj(t.g(offs)), t_bar.g(offs), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(t_negbar.g(-offs), t_bar.g(offs), rtol=1e-10, atol=1e-12)


def test_kernel_decays_with_distance():
    g = GridSpec(3, 1.0, 48)
    rho = make_frequency_pair([4, 0, 0], 0.0).rho1
    kt = faddeev_kernel_table(rho, g, shift=0.5)
    vals = [abs(kt.g(np.array([[0, 0, k]]))[0]) for k in (2, 4, 8, 16)]
    assert vals[0] > vals[1] > vals[2] > vals[3]


def test_kernel_interpolation_matches_nodes_and_guards_range():
    g = GridSpec(3, 0.5, 16)
    rho = frequency_of_modulus(8.0)
    kt = faddeev_kernel_table(rho, g, shift=0.5)
    offs = np.array([[1, 2, -3], [0, 0, 0], [-4, 5, 2]])
    np.testing.assert_allclose(kt.interpolate(offs * g.h), kt.g(offs), rtol=1e-12, atol=1e-12)
    with pytest.raises(FrequencyError):
        kt.g(np.array([[g.N, 0, 0]]))
    with pytest.raises(FrequencyError):
        kt.interpolate(np.array([[1.5 * g.L, 0, 0]]))


def test_kernel_table_is_cached_and_read_only():
    g = GridSpec(3, 0.5, 16)
    rho = frequency_of_modulus(8.0)
    a = faddeev_kernel_table(rho, g, shift=0.5)
    assert a is faddeev_kernel_table(rho, g, shift=0.5)
    with pytest.raises(ValueError):
        a.table[0, 0, 0] = 1.0
