import math

import numpy as np
import pytest

from clab.grid import BoundaryMesh, DomainSpec, GridSpec
from clab.wall import (
    CLAMP_SOFTNESS,
    EnsembleConfig,
    WallError,
    WallSpec,
    build_wall,
    cauchy_invariance_test,
    clamp,
    dirichlet_energy,
    feynman_kac_estimate,
    fk_compare,
    interior_decay_study,
    regularize,
    run_paths,
    scaling_check,
    solve_regularized,
)

G2 = GridSpec(2, 2.0, 64)
D2 = DomainSpec(1.0, 0.0)
SPEC = WallSpec(center=(0.0, 0.0), radius=0.5, mu=-3.0)


@pytest.fixture(scope="module")
def mesh2():
    return BoundaryMesh(G2, D2, 2)


@pytest.fixture(scope="module")
def wall2():
    return build_wall(SPEC, G2, D2)


# --------------------------------------------------------------------------
# the wall and its regularisation


def test_wall_value_at_distance_half():
    spec = WallSpec(center=(0.0, 0.0), radius=0.6, mu=-3.0, c0=1.0, collar=0.55)
    # inside collar/2 the amplitude is exactly c0
    assert spec.q(np.array([[0.0, 0.6 + 0.2]]))[0] == pytest.approx(-(0.2**-3), rel=1e-14)
    wide = WallSpec(center=(0.0, 0.0), radius=1.2, mu=-3.0, collar=1.1)
    assert wide.q(np.array([[1.7, 0.0]]))[0] == pytest.approx(-8.0, rel=1e-14)


def test_wall_is_non_positive_and_vanishes_off_collar(wall2):
    assert np.all(wall2.raw <= 0)
    far = wall2.dist >= SPEC.collar
    assert np.all(wall2.raw[far] == 0)
    assert np.all(wall2.raw[wall2.dist < SPEC.collar / 2] < 0)


def test_wall_spec_validation():
    with pytest.raises(WallError):
        WallSpec(mu=-2.0)
    WallSpec(mu=-1.0, mild=True)
    with pytest.raises(WallError):
        WallSpec(c1=2.0)
    with pytest.raises(WallError):
        build_wall(WallSpec(radius=0.8), G2, D2)
    with pytest.raises(WallError):
        build_wall(SPEC, GridSpec(3, 2.0, 16))


def test_clamp_arithmetic():
    d = np.array([0.05, 0.2])
    q = -(d**-3.0)
    qn = clamp(q, d, 10, 0.5, -3.0)
    b = -500.0
    assert b <= qn[0] <= b + CLAMP_SOFTNESS * 500 * math.log(2) + 1e-12
    assert qn[0] == pytest.approx(-500.0, rel=1e-6)
    assert qn[1] == q[1]  # untouched beyond 1/n
    assert q[1] == pytest.approx(-125.0, rel=1e-14)


def test_regularized_wall_finite_and_monotone_in_n(wall2):
    prev = None
    for n in (4, 8, 16, 32):
        reg = regularize(wall2, n)
        assert np.all(np.isfinite(reg.values))
        assert reg.level == pytest.approx(-SPEC.c1 * n**3)
        near = wall2.dist <= 1.0 / n
        assert np.all(reg.values[near] >= reg.level - 1e-9)
        np.testing.assert_array_equal(reg.values[~near], wall2.raw[~near])
        if prev is not None:
            # deeper clamps never raise the potential
            assert np.all(reg.values <= prev + 1e-8 * np.abs(prev).max())
        prev = reg.values


def test_regularize_rejects_bad_index(wall2):
    with pytest.raises(WallError):
        regularize(wall2, 0)


# --------------------------------------------------------------------------
# deterministic solves


def test_energy_of_linear_field_is_volume(mesh2):
    x = G2.coords()
    G = dirichlet_energy(mesh2, x[0], np.zeros(G2.shape))
    assert G == pytest.approx((2 * D2.a) ** 2, rel=1e-12)


def test_free_solve_reproduces_linear_field(mesh2):
    flat = build_wall(WallSpec(mu=-1.0, mild=True, c0=1e-300, c1=1e-301), G2, D2)
    sol = solve_regularized(mesh2, flat, 4, lambda p: p[:, 0])
    x = G2.coords()[0]
    c, m = G2.N // 2, mesh2.m
    box = (slice(c - m, c + m + 1),) * 2
    assert np.max(np.abs(sol.u[box] - x[box])) < 1e-12
    assert sol.G == pytest.approx(4.0, rel=1e-10)


def test_energy_increases_with_n_and_stays_below_comparator(mesh2, wall2):
    f = lambda p: 1.0 + 0.0 * p[:, 0]
    sols = [solve_regularized(mesh2, wall2, n, f) for n in (4, 8, 16)]
    Gs = [s.G for s in sols]
    assert Gs[0] <= Gs[1] <= Gs[2]
    assert Gs[-1] <= sols[-1].G_comparator
    inner = wall2.inner_mask()
    sups = [np.max(np.abs(s.u[inner])) for s in sols]
    assert sups[0] > sups[1] > sups[2]


# --------------------------------------------------------------------------
# decay and invariance


def test_decay_study_zero_data_gives_zeros(mesh2, wall2):
    st = interior_decay_study(mesh2, wall2, [4, 8], lambda p: 0.0 * p[:, 0])
    assert all(r.sup_inner == 0 and r.sup_outer == 0 for r in st.rows)


def test_decay_study_ratio_and_outer_control(mesh2, wall2, tmp_path):
    st = interior_decay_study(mesh2, wall2, [4, 8, 16, 32], lambda p: 1.0 + 0.0 * p[:, 0])
    assert st.ratio >= 10
    assert st.outer_change < 2
    assert st.exponent == pytest.approx(2 * (2 - 3) / -3)
    out = tmp_path / "decay.csv"
    st.to_csv(out)
    assert out.read_text().splitlines()[0] == "n,sup_inner,sup_outer,G_value,bound_shape"


def test_invariance_equal_inner_potentials_is_zero(mesh2, wall2):
    qa = np.zeros(G2.shape)
    rows = cauchy_invariance_test(mesh2, wall2, qa, qa.copy(), [4, 8])
    assert all(r.divergence == 0 for r in rows)


def test_invariance_divergence_shrinks_with_n(mesh2, wall2):
    x = G2.coords()
    r2 = x[0] ** 2 + x[1] ** 2
    qa = np.where(r2 < 0.2**2, -5.0 * np.cos(np.pi * np.sqrt(r2) / 0.4) ** 2, 0.0)
    rows = cauchy_invariance_test(mesh2, wall2, qa, None, [4, 16])
    assert rows[0].divergence > 0
    assert rows[1].divergence < rows[0].divergence


# --------------------------------------------------------------------------
# Feynman-Kac


CFG = EnsembleConfig(paths=4000, dt=1e-3, seed=7)


def test_fk_constant_datum_is_exactly_one(mesh2):
    res = feynman_kac_estimate((0.2, -0.1), mesh2, None, lambda p: np.ones(len(p)), CFG)
    assert res.mean == 1.0
    assert res.stderr == 0.0


def test_fk_harmonic_probe(mesh2):
    res = feynman_kac_estimate((0.3, 0.0), mesh2, None, lambda p: p[:, 0], CFG)
    assert abs(res.mean - 0.3) <= 3 * res.stderr


def test_fk_is_reproducible(mesh2):
    a = feynman_kac_estimate((0.3, 0.0), mesh2, None, lambda p: p[:, 0], CFG)
    b = feynman_kac_estimate((0.3, 0.0), mesh2, None, lambda p: p[:, 0], CFG)
    assert a.mean == b.mean


def test_fk_rejects_start_outside(mesh2):
    with pytest.raises(WallError):
        feynman_kac_estimate((1.2, 0.0), mesh2, None, lambda p: p[:, 0], CFG)


def test_paths_exit_on_the_boundary():
    ens = run_paths(np.zeros(2), EnsembleConfig(paths=500, dt=1e-3, seed=1), a=0.5)
    assert ens.capped == 0
    assert np.allclose(np.max(np.abs(ens.exit_points), axis=1), 0.5)
    assert np.all(ens.exit_times > 0)


def test_fk_matches_fd_with_wall(mesh2, wall2):
    f = lambda p: 1.0 + 0.5 * p[:, 0]
    pts = [(0.0, 0.0), (0.7, 0.2)]
    rows = fk_compare(pts, mesh2, wall2, 16, f, EnsembleConfig(paths=3000, dt=2.5e-4, seed=3))
    for r in rows:
        assert r.agrees, r


def test_brownian_scaling():
    ks = scaling_check(cfg=EnsembleConfig(paths=4000, dt=1e-5, seed=5))
    assert ks < 0.05
