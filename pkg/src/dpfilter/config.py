"""Experiment configuration: schema validation and model assembly.

All physics lives in a JSON config validated against the published schema
(``dpfilter/schema/config.schema.json``); CLI flags only choose the
subcommand, config path, output directory, thread count, and strictness.
Validation failures always name the offending field path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
import jsonschema

from .dynamics import superposition
from .errors import ValidationError
from .kernel import (
    DEFAULT_SITE_CAP,
    Kernel,
    PhysicalConstants,
    QuadSpec,
    SpatialGrid,
    SpectralDecomposition,
    build_grid,
    build_kernel,
    spectral_decompose,
)
from .quantum_ops import (
    DEFAULT_DIMENSION_CAP,
    CollapseSet,
    HilbertSpace,
    MassDensityFamily,
    Operator,
    ParticleSpec,
    build_space,
    collapse_set,
    hamiltonian,
    mass_density_family,
)

_schema_cache: dict | None = None


def config_schema() -> dict:
    global _schema_cache
    if _schema_cache is None:
        text = (resources.files("dpfilter") / "schema" / "config.schema.json").read_text()
        _schema_cache = json.loads(text)
    return _schema_cache


def _path_of(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def validate_config_dict(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ValidationError(f"config invalid at {_path_of(err)}: {err.message}")
    run = raw["run"]
    stride = run.get("record_stride", 1)
    if run["n_steps"] % stride != 0:
        raise ValidationError(
            f"config invalid at run.record_stride: {stride} does not divide "
            f"n_steps={run['n_steps']}")


@dataclass(eq=False)
class ExperimentConfig:
    raw: dict
    sha256: str

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            blob = fh.read()
        try:
            raw = json.loads(blob.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
        validate_config_dict(raw)
        return cls(raw=raw, sha256=hashlib.sha256(blob).hexdigest())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate_config_dict(raw)
        blob = json.dumps(raw, sort_keys=True).encode()
        return cls(raw=raw, sha256=hashlib.sha256(blob).hexdigest())

    # -- section accessors ---------------------------------------------------

    @property
    def run(self) -> dict:
        return self.raw["run"]

    @property
    def outputs(self) -> dict:
        return self.raw.get("outputs", {})

    @property
    def seed(self) -> int:
        return int(self.run["seed"])

    def cap(self, name: str, default: int) -> int:
        return int(self.raw.get("caps", {}).get(name, default))

    def quad_spec(self) -> QuadSpec:
        kc = self.raw.get("kernel_check", {})
        return QuadSpec(
            n_nodes=int(kc.get("n_nodes", 2000)),
            delta=float(kc.get("delta", 1e-3)),
            u_max=float(kc.get("u_max", 1e8)),
        )

    def r_samples(self) -> list[float]:
        return [float(r) for r in self.raw.get("kernel_check", {}).get(
            "r_samples", [0.5, 1.0, 2.0])]


@dataclass(eq=False)
class ModelBundle:
    """Everything a subcommand needs, assembled once from a config."""

    config: ExperimentConfig
    constants: PhysicalConstants
    grid: SpatialGrid
    kernel: Kernel
    decomposition: SpectralDecomposition
    space: HilbertSpace
    family: MassDensityFamily
    collapse: CollapseSet
    hamiltonian: Operator
    initial_vector: np.ndarray   # product pure state from the particle specs


def _particle_state(spec: dict, grid: SpatialGrid, index: int) -> np.ndarray:
    n = grid.n_sites
    if spec["type"] == "basis":
        site = int(spec["site"])
        if site >= n:
            raise ValidationError(
                f"config invalid at particles.{index}.initial.site: {site} >= {n} grid sites")
        vec = np.zeros(n, dtype=complex)
        vec[site] = 1.0
        return vec
    terms = []
    for k, term in enumerate(spec["terms"]):
        site = int(term["site"])
        if site >= n:
            raise ValidationError(
                f"config invalid at particles.{index}.initial.terms.{k}.site: "
                f"{site} >= {n} grid sites")
        amp = term["amplitude"]
        amp = complex(amp[0], amp[1]) if isinstance(amp, list) else complex(amp)
        terms.append((site, amp))
    return superposition(n, terms)


def build_model(cfg: ExperimentConfig, strict: bool = False) -> ModelBundle:
    raw = cfg.raw
    consts = PhysicalConstants(**raw.get("constants", {}))
    g = raw["grid"]
    grid = build_grid(g["dim"], g["n_per_axis"], g["extent"],
                      site_cap=cfg.cap("grid_sites", DEFAULT_SITE_CAP))
    kern = build_kernel(grid, raw["kernel"]["family"], consts,
                        **raw["kernel"].get("params", {}))
    decomp = spectral_decompose(kern, strict=strict)
    specs = [ParticleSpec(p["mass"], grid) for p in raw["particles"]]
    space = build_space(specs, cap=cfg.cap("hilbert_dimension", DEFAULT_DIMENSION_CAP))
    family = mass_density_family(space, grid, raw["mollifier_sigma"])
    collapse = collapse_set(family, decomp, consts)
    h_cfg = raw.get("hamiltonian", {"kind": "zero"})
    h_op = hamiltonian(space, h_cfg["kind"], **h_cfg.get("params", {}))

    vec = None
    for i, p in enumerate(raw["particles"]):
        part = _particle_state(p["initial"], grid, i)
        vec = part if vec is None else np.kron(vec, part)
    return ModelBundle(config=cfg, constants=consts, grid=grid, kernel=kern,
                       decomposition=decomp, space=space, family=family,
                       collapse=collapse, hamiltonian=h_op, initial_vector=vec)
