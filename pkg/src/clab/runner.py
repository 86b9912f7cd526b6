"""Experiment dispatch, CSV output and run manifests.

CSV files contain only computed numbers formatted with a fixed precision,
so identical configurations (and seeds) reproduce them byte for byte.
Timings live in the manifest, which is not part of that guarantee.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .cache import ArtifactCache, array_hash, atomic_write_text
from .config import ExperimentConfig
from .grid import write_field
from .plotdata import emit_plot_data, error_map

log = logging.getLogger(__name__)


def _f(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v.replace(",", ";")
    return f"{float(v) + 0.0:.12e}"


def write_csv(path: Path, header: list[str], rows: list[list]) -> str:
    text = ",".join(header) + "\n" + "".join(",".join(_f(v) for v in r) + "\n" for r in rows)
    atomic_write_text(path, text)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    version: str
    backend: str
    stages: dict = field(default_factory=dict)  # stage -> seconds
    artifacts: dict = field(default_factory=dict)  # name -> hash
    outputs: dict = field(default_factory=dict)  # file -> hash
    summary: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    cache_hits: int = 0

    def write(self, out: Path) -> Path:
        p = Path(out) / "manifest.json"
        atomic_write_text(p, json.dumps(self.__dict__, indent=2, sort_keys=True, default=str))
        return p


class _Run:
    def __init__(self, cfg: ExperimentConfig, cache: ArtifactCache):
        self.cfg = cfg
        self.cache = cache
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.man = RunManifest(cfg.kind, cfg.hash(), __version__, kernels.BACKEND)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.man.stages[name] = round(time.perf_counter() - t0, 6)

    def csv(self, name: str, header, rows) -> None:
        self.man.outputs[name] = write_csv(self.out / name, header, rows)

    # -- shared objects --------------------------------------------------------
    def grid(self):
        from .grid import DomainSpec, GridSpec

        return GridSpec(**self.cfg.grid), DomainSpec(**self.cfg.domain)

    def mesh(self):
        from .grid import BoundaryMesh

        g, d = self.grid()
        return BoundaryMesh(g, d, self.cfg.solver.get("degree", 4))

    def potential(self, which: str = "potential"):
        from .grid import ScalarField
        from .potentials import potential_from_config, sample_potential

        g, d = self.grid()
        spec = getattr(self.cfg, which)
        if spec is None:
            return ScalarField(g, np.zeros(g.shape))
        return sample_potential(potential_from_config(spec), g, d).field

    def dtn(self, mesh, q, E: float = 0.0):
        from .forward import dtn_matrix, q_hash

        params = {"q": q_hash(q, mesh.grid, E), "a": mesh.domain.a, "degree": mesh.degree, "basis": mesh.basis_kind}
        arr, h, hit = self.cache.get_or_compute("dtn", params, lambda: dtn_matrix(mesh, q, E))
        self.man.artifacts[f"dtn-{params['q']}"] = h
        return arr, hit


# -- experiments ---------------------------------------------------------------


def _faddeev_probe(r: _Run):
    from .faddeev import frequency_of_modulus, operator_norm_probe

    g, d = r.grid()
    fr = r.cfg.frequency
    rhos = [frequency_of_modulus(x) for x in fr["rho_list"]]
    with r.stage("probe"):
        rows, slope = operator_norm_probe(g, d, rhos, trials=fr.get("trials", 5), seed=r.cfg.seed, shift=fr.get("shift", 0.5))
    r.csv("norm_probe.csv", ["rho_abs", "norm_est", "char_count"], [[x.rho_abs, x.norm_est, x.char_count] for x in rows])
    emit_plot_data(r.out / "norm_decay.dat", {"rho_abs": [x.rho_abs for x in rows], "norm": [x.norm_est for x in rows]})
    r.man.summary["slope"] = slope


def _cgo_decay(r: _Run):
    from .cgo import corrector_decay_study

    q = r.potential()
    fr = r.cfg.frequency
    with r.stage("decay"):
        rows, slope = corrector_decay_study(q, fr["xi"], fr["betas"], p=fr.get("p", 4.0), tol=r.cfg.solver.get("tol", 1e-10))
    r.csv(
        "cgo_decay.csv",
        ["beta", "rho_abs", "psi_l2", "psi_lp", "kappa_hat", "iters", "remainder_abs", "error"],
        [[x.beta, x.rho_abs, x.psi_l2, x.psi_lp, x.kappa_hat, x.iters, x.remainder_abs, x.error] for x in rows],
    )
    ok = [x for x in rows if not x.error]
    emit_plot_data(r.out / "cgo_decay.dat", {"rho_abs": [x.rho_abs for x in ok], "psi_l2": [x.psi_l2 for x in ok]})
    r.man.summary["slope"] = slope
    r.man.errors += [f"beta={x.beta}: {x.error}" for x in rows if x.error]


def _identity_check(r: _Run):
    from .cgo import identity_check

    q1 = r.potential()
    q2 = r.potential("potential_b")
    fr = r.cfg.frequency
    with r.stage("identity"):
        rows = identity_check(q1, q2, fr["xi"], fr["betas"], tol=r.cfg.solver.get("tol", 1e-10))
    r.csv(
        "identity.csv",
        ["beta", "rho_abs", "remainder_abs", "qhat_diff_re", "qhat_diff_im", "discrepancy", "kappa1", "kappa2"],
        [[x.beta, x.rho_abs, abs(x.remainder), x.qhat_diff.real, x.qhat_diff.imag, x.discrepancy, x.kappa1, x.kappa2] for x in rows],
    )


def _forward_dtn(r: _Run):
    from .forward import symmetry_defect

    mesh = r.mesh()
    q = r.potential()
    with r.stage("dtn"):
        Lam, hit = r.dtn(mesh, q, r.cfg.solver.get("E", 0.0))
    r.csv("dtn.csv", [f"c{j}" for j in range(Lam.shape[1])], Lam.tolist())
    r.man.summary["symmetry_defect"] = symmetry_defect(mesh, Lam)
    r.man.summary["cache_hit"] = hit


def _reconstruct(r: _Run):
    from .calderon import band_limit_truth, correlation, reconstruct, xi_lattice
    from .forward import CauchySubspace

    mesh = r.mesh()
    fr, so = r.cfg.frequency, r.cfg.solver
    mode = so.get("mode", "oracle")
    q = r.potential() if r.cfg.potential is not None else None
    xis = xi_lattice(fr["xi_max"], fr.get("xi_step", 1.0))
    cd = None
    if mode == "blind":
        with r.stage("cauchy_data"):
            if so.get("data"):
                Lam = np.load(so["data"])
                r.man.artifacts["data"] = array_hash(Lam)
            else:
                Lam, _ = r.dtn(mesh, q)
            cd = CauchySubspace(np.vstack([np.eye(mesh.basis_size), Lam]))
    count = so.get("source_count", 200)
    bases = _CachedKernelBases(r, mesh, count) if mode == "blind" else None
    with r.stage("reconstruct"):
        rep = reconstruct(mesh, xis, fr["rho_list"], mode, q=q, cd=cd, build_field=so.get("field", False),
                          source_count=count, kernel_bases=bases)
    rows = [
        [*x.xi, x.beta, x.qhat.real, x.qhat.imag, x.qhat_true.real, x.qhat_true.imag, x.rel_err, x.diag]
        for x in rep.rows
    ]
    rows += [[*xi, math.inf, v.real, v.imag, t.real, t.imag, e, math.nan] for xi, (v, t, e) in rep.extrapolated.items()]
    r.csv("report.csv", ["xi1", "xi2", "xi3", "beta", "qhat_re", "qhat_im", "qhat_true_re", "qhat_true_im", "rel_err", "diag"], rows)
    r.man.summary["median_rel_err"] = rep.median_error()
    r.man.errors += [f"xi={x.xi} |rho|={x.rho_abs}: {x.error}" for x in rep.rows if x.error]
    if rep.field is not None:
        write_field(r.out / "field.bin", rep.field)
        r.man.outputs["field.bin"] = array_hash(rep.field.values)
    if rep.field is not None and q is not None:
        truth = band_limit_truth(q, xis)
        g = mesh.grid
        inside = np.all([np.abs(c) < mesh.domain.a for c in g.coords()], axis=0)
        error_map(r.out / "error_map.dat", g.coords(), rep.field.values - truth.values, inside)
        r.man.summary["correlation"] = correlation(rep.field.values[inside], truth.values[inside])


class _CachedKernelBases(dict):
    """Kernel-basis mapping for :func:`calderon.reconstruct` backed by the artifact cache.

    The sampled source columns depend only on ``rho``, the grid and the
    source layout, so they are stored once and reused across potentials.
    """

    def __init__(self, run: _Run, mesh, count: int):
        super().__init__()
        self.run, self.mesh, self.count = run, mesh, count

    def _params(self, key) -> dict:
        g = self.mesh.grid
        return {"rho": [float(v) for v in key], "grid": [g.n, g.L, g.N], "a": self.mesh.domain.a,
                "degree": self.mesh.degree, "count": self.count}

    def __contains__(self, key) -> bool:
        if dict.__contains__(self, key):
            return True
        p = self.run.cache.path("kernel", self._params(key))
        if p.exists():
            self._load(key, lambda: None)
            return True
        return False

    def _load(self, key, compute):
        from .calderon import kernel_basis_from_raw, source_layout
        from .faddeev import ComplexFrequency

        raw, h, _ = self.run.cache.get_or_compute("kernel", self._params(key), compute)
        n = len(key) // 2
        rho = ComplexFrequency(np.array(key[:n]), np.array(key[n:]))
        self.run.man.artifacts[f"kernel-{h}"] = h
        dict.__setitem__(self, key, kernel_basis_from_raw(np.asarray(raw), source_layout(self.mesh, self.count), rho,
                                                          self.mesh.basis_size))

    def __setitem__(self, key, basis) -> None:
        self._load(key, lambda: basis.raw)


def _wall_parts(r: _Run):
    from .grid import BoundaryMesh
    from .wall import WallSpec, build_wall

    g, d = r.grid()
    w = dict(r.cfg.wall)
    n_list = w.pop("n_list")
    fcfg = w.pop("f", "one")
    for k in ("points",):
        w.pop(k, None)
    if "center" in w:
        w["center"] = tuple(w["center"])
    else:
        w["center"] = (0.0,) * g.n
    spec = WallSpec(**w)
    mesh = BoundaryMesh(g, d, r.cfg.solver.get("degree", 4))
    return mesh, build_wall(spec, g, d), n_list, _boundary_function(fcfg)


def _boundary_function(fcfg):
    if fcfg in ("one", None):
        return lambda p: np.ones(len(p))
    if fcfg == "x1":
        return lambda p: p[:, 0]
    if fcfg == "zero":
        return lambda p: np.zeros(len(p))
    raise ValueError(f"unknown boundary datum {fcfg!r} (valid: one, x1, zero)")


def _wall_demo(r: _Run):
    from .wall import interior_decay_study

    mesh, wall, n_list, f = _wall_parts(r)
    with r.stage("decay"):
        st = interior_decay_study(mesh, wall, n_list, f)
    r.csv("wall_decay.csv", ["n", "sup_norm", "G_value", "sup_outer"], [[x.n, x.sup_inner, x.G, x.sup_outer] for x in st.rows])
    emit_plot_data(r.out / "wall_decay.dat", {"n": [x.n for x in st.rows], "sup_norm": [x.sup_inner for x in st.rows]})
    r.man.summary.update(ratio=st.ratio, outer_change=st.outer_change, G_comparator=st.G_comparator)


def _fk_compare(r: _Run):
    from .wall import EnsembleConfig, fk_compare

    mesh, wall, n_list, f = _wall_parts(r) if r.cfg.wall else (r.mesh(), None, [None], _boundary_function("x1"))
    e = r.cfg.ensemble
    cfg = EnsembleConfig(paths=e.get("paths", 100_000), dt=e.get("dt", 2.5e-4), seed=r.cfg.seed, stream=e.get("stream", 0))
    pts = [np.asarray(p, float) for p in e["points"]]
    with r.stage("fk"):
        rows = fk_compare(pts, mesh, wall, n_list[0] if wall is not None else None, f, cfg)
    r.csv(
        "fk_compare.csv",
        [*(f"x{i + 1}" for i in range(mesh.grid.n)), "fk_mean", "fk_stderr", "fd_value", "fd_tol"],
        [[*x.x, x.fk_mean, x.fk_stderr, x.fd_value, x.fd_tol] for x in rows],
    )
    r.man.summary["agree"] = all(x.agrees for x in rows)


def _numerical_errors() -> tuple:
    from .calderon import CalderonError
    from .cgo import SolverError
    from .forward import ForwardError
    from .layers import LayerError

    return (SolverError, ForwardError, CalderonError, LayerError, np.linalg.LinAlgError, FloatingPointError)


NUMERICAL_ERRORS = _numerical_errors()

DISPATCH = {
    "faddeev-probe": _faddeev_probe,
    "cgo-decay": _cgo_decay,
    "identity-check": _identity_check,
    "forward-dtn": _forward_dtn,
    "reconstruct": _reconstruct,
    "wall-demo": _wall_demo,
    "fk-compare": _fk_compare,
}


def run(cfg: ExperimentConfig, cache: ArtifactCache | None = None) -> RunManifest:
    """Validate, dispatch, and write outputs plus ``manifest.json`` into ``cfg.out``."""
    cfg.validate()
    r = _Run(cfg, cache or ArtifactCache())
    try:
        DISPATCH[cfg.kind](r)
    except NUMERICAL_ERRORS as exc:
        r.man.errors.append(f"{type(exc).__name__}: {exc}")
        r.man.write(r.out)
        raise
    finally:
        r.man.cache_hits = r.cache.hits
    r.man.write(r.out)
    return r.man
