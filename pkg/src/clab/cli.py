"""Command line interface.

Every verb builds an :class:`~clab.config.ExperimentConfig`, optionally
starting from ``--config file.json`` with flags overriding its entries, and
hands it to :func:`clab.runner.run`.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _json_file(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise argparse.ArgumentTypeError(f"{path}: {exc}") from None


def _points_file(path: str) -> list[list[float]]:
    try:
        pts = np.atleast_2d(np.loadtxt(path, comments="#", delimiter=None))
    except (OSError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"{path}: {exc}") from None
    return pts.tolist()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clab", description="CGO reconstruction and wall-potential experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=_json_file, help="JSON experiment configuration; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--N", type=int, help="grid points per axis")
        return p

    p = verb("faddeev-probe", "empirical norm of G_rho on random test fields over a |rho| range")
    p.add_argument("--rho-min", type=float)
    p.add_argument("--rho-max", type=float)
    p.add_argument("--steps", type=int, help="number of geometrically spaced |rho| values")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)

    for name, help_ in (("cgo-decay", "corrector norms over a beta schedule"),
                        ("identity-check", "uniqueness identity remainder over a beta schedule")):
        p = verb(name, help_)
        p.add_argument("--xi", type=_floats)
        p.add_argument("--beta-list", type=_floats)
        p.add_argument("--tol", type=float)
        p.add_argument("--potential", type=_json_file, help="potential JSON (kind conormal, bump or zero)")
        if name == "identity-check":
            p.add_argument("--potential-b", type=_json_file, help="second potential (default zero)")

    p = verb("forward-dtn", "cached Dirichlet-to-Neumann matrix")
    p.add_argument("--potential", type=_json_file)
    p.add_argument("--E", type=float)

    p = verb("reconstruct", "recover q^(xi) over a lattice")
    p.add_argument("--mode", choices=("oracle", "blind"))
    p.add_argument("--xi-max", type=float)
    p.add_argument("--xi-step", type=float)
    p.add_argument("--beta-list", type=_floats, help="schedule of |rho| values for the large-frequency limit")
    p.add_argument("--potential", type=_json_file)
    p.add_argument("--data", help="DtN matrix (.npy) for blind mode; default computes it from --potential")
    p.add_argument("--field", action="store_true", help="also write the band-limited reconstruction")

    p = verb("wall-demo", "interior decay under a regularised wall")
    p.add_argument("--mu", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--n-list", type=_ints)
    p.add_argument("--f", choices=("one", "x1", "zero"), help="boundary datum")

    p = verb("fk-compare", "Feynman-Kac against finite differences")
    p.add_argument("--points", type=_points_file, help="whitespace file with one probe point per line")
    p.add_argument("--paths", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="wall regularisation level")
    p.add_argument("--f", choices=("one", "x1", "zero"))
    p.add_argument("--no-wall", action="store_true", help="q = 0 (harmonic check)")

    sub.add_parser("selftest", help="quick end-to-end checks of the installation")
    return ap


def _set(d: dict, key: str, val) -> None:
    if val is not None:
        d[key] = val


def config_from_args(args) -> ExperimentConfig:
    d = dict(args.config or {})
    d["kind"] = args.verb
    _set(d, "out", args.out)
    v = args.verb
    if v in ("wall-demo", "fk-compare") and "grid" not in d:
        d["grid"] = {"n": 2, "L": 2.0, "N": 256}
        d.setdefault("domain", {"a": 1.0, "w": 0.0})
    if args.N is not None:
        grid = dict(d.get("grid") or {"n": 3, "L": 0.5})
        grid["N"] = args.N
        d["grid"] = grid
    sec = lambda k: d.setdefault(k, {})  # noqa: E731
    if v == "faddeev-probe":
        _set(d, "seed", args.seed)
        if args.rho_min is not None or args.rho_max is not None:
            lo, hi = args.rho_min or 8.0, args.rho_max or 64.0
            steps = args.steps or 4
            sec("frequency")["rho_list"] = np.geomspace(lo, hi, steps).tolist()
        _set(sec("frequency"), "trials", args.trials)
    elif v in ("cgo-decay", "identity-check"):
        _set(sec("frequency"), "xi", args.xi)
        _set(sec("frequency"), "betas", args.beta_list)
        _set(sec("solver"), "tol", args.tol)
        _set(d, "potential", args.potential)
        if v == "identity-check":
            _set(d, "potential_b", args.potential_b)
    elif v == "forward-dtn":
        _set(d, "potential", args.potential)
        _set(sec("solver"), "E", args.E)
    elif v == "reconstruct":
        _set(sec("solver"), "mode", args.mode)
        _set(sec("solver"), "data", args.data)
        if args.field:
            sec("solver")["field"] = True
        _set(sec("frequency"), "xi_max", args.xi_max)
        _set(sec("frequency"), "xi_step", args.xi_step)
        _set(sec("frequency"), "rho_list", args.beta_list)
        _set(d, "potential", args.potential)
    elif v in ("wall-demo", "fk-compare"):
        if v == "wall-demo":
            _set(sec("wall"), "mu", args.mu)
            _set(sec("wall"), "c1", args.c1)
            _set(sec("wall"), "n_list", args.n_list)
            _set(sec("wall"), "f", args.f)
        else:
            _set(d, "seed", args.seed)
            e = sec("ensemble")
            _set(e, "points", args.points)
            _set(e, "paths", args.paths)
            _set(e, "dt", args.dt)
            if args.no_wall:
                d["wall"] = {}
            else:
                w = sec("wall")
                w.setdefault("n_list", [8])
                if args.n is not None:
                    w["n_list"] = [args.n]
                _set(w, "f", args.f)
    d.setdefault("out", f"out/{v}")
    return ExperimentConfig.from_dict(d)


def selftest() -> int:
    """Small end-to-end checks; prints one line per check."""
    import tempfile

    from . import kernels
    from .runner import run

    checks = []
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    tab = np.random.default_rng(1).standard_normal((9, 9))
    be = kernels.backends()
    ref = be["python"].multilinear(tab, -1.0, 0.25, pts)
    checks.append(("kernel backends agree", all(np.array_equal(m.multilinear(tab, -1.0, 0.25, pts), ref) for m in be.values())))
    try:
        ExperimentConfig(kind="nonsense").validate()
        checks.append(("unknown kind rejected", False))
    except ConfigError as exc:
        checks.append(("unknown kind rejected", "valid:" in str(exc)))
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for i in range(2):
            cfg = ExperimentConfig(kind="wall-demo", grid={"n": 2, "L": 2.0, "N": 64}, domain={"a": 1.0, "w": 0.0},
                                   wall={"n_list": [4, 8, 16]}, out=f"{tmp}/{i}")
            outs.append(run(cfg).outputs)
        checks.append(("wall-demo reproducible", outs[0] == outs[1]))
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"backend: {kernels.BACKEND}")
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "selftest":
        return selftest()
    from .runner import NUMERICAL_ERRORS, run

    try:
        cfg = config_from_args(args)
        man = run(cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps({"out": cfg.out, "outputs": man.outputs, "summary": man.summary, "errors": man.errors},
                     indent=2, default=str))
    return EXIT_NUMERICAL if man.errors and not man.outputs else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
