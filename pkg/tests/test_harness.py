import json

import numpy as np
import pytest

from clab.cache import ArtifactCache
from clab.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from clab.config import KINDS, ConfigError, ExperimentConfig
from clab.grid import BoundaryMesh, DomainSpec, GridSpec
from clab.plotdata import emit_plot_data, error_map
from clab.runner import run

SMALL_GRID = {"n": 3, "L": 2.0, "N": 16}
SMALL_DOMAIN = {"a": 1.0, "w": 0.0}


def _wall_cfg(out):
    return ExperimentConfig(kind="wall-demo", grid={"n": 2, "L": 2.0, "N": 64}, domain={"a": 1.0, "w": 0.0},
                            wall={"n_list": [4, 8, 16]}, out=str(out))


def _csv_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


# --------------------------------------------------------------------------
# configuration


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(kind="nonsense").validate()
    for k in KINDS:
        assert k in str(err.value)


def test_validation_reports_every_field():
    cfg = ExperimentConfig(kind="fk-compare", grid={"n": 3, "L": 0.5, "N": 15})
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    msgs = err.value.errors
    assert any(m.startswith("grid/domain") for m in msgs)
    assert any(m.startswith("seed") for m in msgs)
    assert any(m.startswith("ensemble.points") for m in msgs)


def test_unknown_config_field_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "wall-demo", "colour": "red"})


def test_inadmissible_exponents_rejected():
    pot = {"kind": "conormal", "H": {"kind": "sphere", "radius": 0.1}, "nu": 0.8}
    cfg = ExperimentConfig(kind="cgo-decay", potential=pot, exponents={"p": 1.01, "r": 100.0},
                           frequency={"xi": [2, 0, 0], "betas": [1, 2, 3]})
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert any(m.startswith("exponents") for m in err.value.errors)


def test_config_hash_ignores_output_directory(tmp_path):
    assert _wall_cfg(tmp_path / "a").hash() == _wall_cfg(tmp_path / "b").hash()


# --------------------------------------------------------------------------
# runs


def test_rerun_reproduces_csv_bytes(tmp_path):
    m1 = run(_wall_cfg(tmp_path / "a"))
    m2 = run(_wall_cfg(tmp_path / "b"))
    assert m1.outputs == m2.outputs
    assert _csv_bytes(tmp_path / "a") == _csv_bytes(tmp_path / "b")
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config_hash"] == m1.config_hash
    assert "decay" in man["stages"]


def test_stochastic_rerun_reproduces_csv_bytes(tmp_path):
    def cfg(out):
        return ExperimentConfig(kind="fk-compare", grid={"n": 2, "L": 2.0, "N": 32}, domain={"a": 1.0, "w": 0.0},
                                ensemble={"points": [[0.3, 0.0]], "paths": 500, "dt": 1e-3}, seed=11, out=str(out))

    run(cfg(tmp_path / "a"))
    run(cfg(tmp_path / "b"))
    assert _csv_bytes(tmp_path / "a") == _csv_bytes(tmp_path / "b")


def test_dtn_cache_hit_keeps_hash(tmp_path):
    cache = ArtifactCache(tmp_path / "cache")

    def cfg(out):
        return ExperimentConfig(kind="forward-dtn", grid=SMALL_GRID, domain=SMALL_DOMAIN, solver={"degree": 2}, out=str(out))

    m1 = run(cfg(tmp_path / "a"), cache)
    m2 = run(cfg(tmp_path / "b"), cache)
    assert not m1.summary["cache_hit"] and m2.summary["cache_hit"]
    assert m1.artifacts == m2.artifacts
    assert m2.cache_hits == 1
    assert _csv_bytes(tmp_path / "a") == _csv_bytes(tmp_path / "b")


def test_cached_arrays_are_read_only(tmp_path):
    cache = ArtifactCache(tmp_path)
    arr, h, hit = cache.get_or_compute("x", {"k": 1}, lambda: np.arange(4.0))
    assert not hit
    with pytest.raises(ValueError):
        arr[0] = 5.0
    again, h2, hit2 = cache.get_or_compute("x", {"k": 1}, lambda: pytest.fail("recomputed"))
    assert hit2 and h2 == h
    assert json.loads(cache.path("x", {"k": 1}).with_suffix(".json").read_text())["hash"] == h


# --------------------------------------------------------------------------
# CLI


def test_cli_wall_demo_exit_ok(tmp_path, capsys):
    code = main(["wall-demo", "--out", str(tmp_path), "--N", "64", "--n-list", "4,8", "--config",
                 str(_json(tmp_path, {"grid": {"n": 2, "L": 2.0}, "domain": {"a": 1.0, "w": 0.0}}))])
    assert code == EXIT_OK
    assert (tmp_path / "wall_decay.csv").read_text().startswith("n,sup_norm,G_value,sup_outer\n")
    assert json.loads(capsys.readouterr().out)["out"] == str(tmp_path)


def test_cli_validation_exit_code(tmp_path, capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("0.1 0.0\n")
    code = main(["fk-compare", "--out", str(tmp_path), "--points", str(pts), "--no-wall"])
    assert code == EXIT_VALIDATION
    assert "seed" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    mesh = BoundaryMesh(GridSpec(**SMALL_GRID), DomainSpec(**SMALL_DOMAIN), 2)
    ni = 2 * mesh.m - 1
    lam1 = 3 * (4 / mesh.grid.h**2) * np.sin(np.pi / (2 * (ni + 1))) ** 2
    cfg = _json(tmp_path, {"grid": SMALL_GRID, "domain": SMALL_DOMAIN, "solver": {"degree": 2}})
    code = main(["forward-dtn", "--out", str(tmp_path / "o"), "--config", str(cfg), "--E", repr(float(lam1))])
    assert code == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["errors"]


def test_cli_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


def _json(tmp_path, d):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


# --------------------------------------------------------------------------
# plot data


def test_empty_report_gives_header_only_file(tmp_path):
    p = emit_plot_data(tmp_path / "e.dat", {"rho_abs": [], "psi_l2": []})
    assert p.read_text() == "# rho_abs psi_l2\n"


def test_decay_plot_columns(tmp_path):
    p = emit_plot_data(tmp_path / "d.dat", {"rho_abs": [8.0, 16.0], "psi_l2": [0.5, 0.25]}, ["decay"])
    lines = p.read_text().splitlines()
    assert lines[:2] == ["# decay", "# rho_abs psi_l2"]
    np.testing.assert_allclose(np.loadtxt(p), [[8.0, 0.5], [16.0, 0.25]])


def test_mismatched_columns_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_plot_data(tmp_path / "x.dat", {"a": [1], "b": [1, 2]})


def test_error_map_is_lexicographic_dump(tmp_path):
    g = GridSpec(3, 1.0, 16)
    x = g.coords()
    vals = x[0] + 10 * x[1] + 100 * x[2]
    p = error_map(tmp_path / "m.dat", x, vals)
    assert p.read_text().splitlines()[0] == "# x y z value"
    data = np.loadtxt(p)
    assert data.shape == (16**3, 4)
    np.testing.assert_allclose(data[:, 3], data[:, 0] + 10 * data[:, 1] + 100 * data[:, 2], atol=1e-10)
    np.testing.assert_array_equal(data[:3, 2], x[2][0, 0, :3])


def test_cli_wall_verbs_default_to_the_square(tmp_path):
    pts = tmp_path / "pts.txt"
    pts.write_text("0.3 0.1\n")
    code = main(["fk-compare", "--points", str(pts), "--paths", "200", "--seed", "1", "--N", "32", "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["kind"] == "fk-compare"
    assert (tmp_path / "o" / "fk_compare.csv").read_text().startswith("x1,x2,")
