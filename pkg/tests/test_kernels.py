import numpy as np
import pytest

from clab import kernels
from clab.wall import EnsembleConfig, run_paths

BACKENDS = kernels.backends()


def test_active_backend_is_listed():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_multilinear_exact_on_affine_tables(name, rng):
    h, origin = 0.25, -1.0
    t = origin + h * np.arange(9)
    X, Y = np.meshgrid(t, t, indexing="ij")
    tab = 1.5 - 2.0 * X + 0.5 * Y + 3.0 * X * Y  # multilinear, reproduced exactly
    pts = rng.uniform(-1, 1, (40, 2))
    ref = 1.5 - 2.0 * pts[:, 0] + 0.5 * pts[:, 1] + 3.0 * pts[:, 0] * pts[:, 1]
    np.testing.assert_allclose(BACKENDS[name].multilinear(tab, origin, h, pts), ref, atol=1e-13)


def test_multilinear_backends_agree_bitwise(rng):
    tab = rng.standard_normal((7, 7, 7)) + 1j * rng.standard_normal((7, 7, 7))
    pts = rng.uniform(-1.2, 1.2, (100, 3))
    ref = BACKENDS["python"].multilinear(tab, -1.0, 1 / 3, pts)
    for mod in BACKENDS.values():
        np.testing.assert_array_equal(mod.multilinear(tab, -1.0, 1 / 3, pts), ref)


def _ensemble(backend, stop_on_hit=False):
    tab = -np.abs(np.random.default_rng(3).standard_normal((17, 17)))
    return run_paths(np.array([0.1, -0.2]), EnsembleConfig(paths=300, dt=1e-3, seed=9), 1.0, tab, -1.0, 0.125,
                     center=np.zeros(2), radius=0.4, stop_on_hit=stop_on_hit, backend=backend)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")
@pytest.mark.parametrize("stop", [False, True])
def test_walk_backends_agree(stop):
    a, b = _ensemble(BACKENDS["python"], stop), _ensemble(BACKENDS["cython"], stop)
    for f in ("exit_points", "integrals", "exit_times", "hit_H", "hit_times"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), rtol=1e-12, atol=1e-14, equal_nan=True)
    assert a.capped == b.capped == 0


def test_walk_integral_is_non_positive_for_non_positive_potential():
    ens = _ensemble(None)
    assert np.all(ens.integrals <= 0)
    assert np.all(np.isfinite(ens.exit_times))
