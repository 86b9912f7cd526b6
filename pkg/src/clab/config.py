"""JSON experiment configuration with field-level validation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

KINDS = ("faddeev-probe", "cgo-decay", "identity-check", "forward-dtn", "reconstruct", "wall-demo", "fk-compare")
STOCHASTIC = ("faddeev-probe", "fk-compare")


class ConfigError(ValueError):
    """Validation failure; ``errors`` holds one message per offending field."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ExperimentConfig:
    """One experiment.

    Sections are plain dictionaries so the JSON stays flat and readable;
    :meth:`validate` checks the keys each experiment kind reads.
    """

    kind: str
    grid: dict = field(default_factory=lambda: {"n": 3, "L": 0.5, "N": 48})
    domain: dict = field(default_factory=lambda: {"a": 0.25, "w": 2 / 48})
    potential: dict | None = None
    potential_b: dict | None = None
    exponents: dict | None = None
    frequency: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    wall: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=dict)
    seed: int | None = None
    out: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError([f"{k}: unknown field" for k in extra])
        if "kind" not in d:
            raise ConfigError(["kind: missing"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Content hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        from .grid import DomainSpec, GridError, GridSpec
        from .potentials import ExponentBundle, PotentialError, potential_from_config, validate_exponents

        errs: list[str] = []
        if self.kind not in KINDS:
            raise ConfigError([f"kind: unknown experiment kind {self.kind!r} (valid: {', '.join(KINDS)})"])
        try:
            g = GridSpec(**self.grid)
            DomainSpec(**self.domain).check(g)
        except (TypeError, GridError) as exc:
            errs.append(f"grid/domain: {exc}")
        specs = []
        for name in ("potential", "potential_b"):
            d = getattr(self, name)
            if d is None:
                continue
            try:
                specs.append(potential_from_config(d))
            except (TypeError, PotentialError) as exc:
                errs.append(f"{name}: {exc}")
        if self.exponents is not None:
            try:
                bundle = ExponentBundle(**self.exponents)
            except TypeError as exc:
                errs.append(f"exponents: {exc}")
            else:
                for spec in specs:
                    if hasattr(spec, "nu"):
                        errs += [f"exponents: {m}" for m in validate_exponents(spec, bundle)]
        if self.kind in STOCHASTIC and self.seed is None:
            errs.append("seed: required for stochastic experiments")
        need = {
            "faddeev-probe": [("frequency", "rho_list")],
            "cgo-decay": [("potential", None), ("frequency", "xi"), ("frequency", "betas")],
            "identity-check": [("potential", None), ("frequency", "xi"), ("frequency", "betas")],
            "reconstruct": [("frequency", "xi_max"), ("frequency", "rho_list")],
            "wall-demo": [("wall", "n_list")],
            "fk-compare": [("ensemble", "points")],
        }.get(self.kind, [])
        for sec, key in need:
            val = getattr(self, sec)
            if key is None:
                if val is None:
                    errs.append(f"{sec}: required for {self.kind}")
            elif key not in (val or {}):
                errs.append(f"{sec}.{key}: required for {self.kind}")
        mode = self.solver.get("mode", "oracle")
        if self.kind == "reconstruct" and mode not in ("oracle", "blind"):
            errs.append(f"solver.mode: {mode!r} (valid: oracle, blind)")
        if errs:
            raise ConfigError(errs)
