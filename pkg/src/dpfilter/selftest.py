"""Bundled miniature verification suite behind the `selftest` subcommand.

Six checks with fixed internal seeds, each a condensed version of an
acceptance property: kernel positivity, spectral reconstruction, dissipation
positivity, the Itô-correction/self-energy identity, pure-state vs density
filter agreement, and a small unraveling smoke test.  ``inject_fault`` exists
to prove the harness can fail: flipping the coupling sign negates the
dissipator, which the positivity certificate must catch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diagnostics import trace_distance
from .dynamics import (
    IntegrationConfig,
    filter_homodyne,
    fresh_noise,
    homodyne_trajectory,
    master_evolve,
    superposition,
)
from .ensemble import run_ensemble
from .kernel import PhysicalConstants, build_grid, build_kernel, spectral_decompose
from .quantum_ops import (
    ParticleSpec,
    build_space,
    collapse_set,
    ito_correction_check,
    lindblad_generator,
    mass_density_family,
)

FAULT_MODES = (None, "flip_g_sign")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    elapsed: float


def _small_system(n_sites=8, sigma=1.0, G=4.0, masses=(1.0,)):
    consts = PhysicalConstants(G=G)
    grid = build_grid(1, n_sites, n_sites / 2.0)   # unit spacing, unit cell weight
    kern = build_kernel(grid, "newtonian_mollified", consts, sigma=sigma)
    decomp = spectral_decompose(kern)
    space = build_space([ParticleSpec(m, grid) for m in masses])
    family = mass_density_family(space, grid, sigma)
    return consts, grid, kern, decomp, space, family, collapse_set(family, decomp, consts)


def _check(name, fn) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def _kernel_psd():
    worst_eig, worst_clip = 0.0, 0.0
    consts = PhysicalConstants(G=2.0)
    grid = build_grid(1, 16, 8.0)
    for family, params in (("newtonian_mollified", {"sigma": 0.75}),
                           ("gaussian", {"ell": 2.0}),
                           ("exponential", {"ell": 2.0})):
        k = build_kernel(grid, family, consts, **params)
        worst_eig = min(worst_eig, float(k.eigenvalues.min()))
        worst_clip = max(worst_clip, k.clipped_mass / k.trace_weighted)
    ok = worst_eig >= 0.0 and worst_clip <= 1e-6
    return ok, f"min_eig={worst_eig:.2e} clip/trace={worst_clip:.2e}"


def _mercer():
    consts = PhysicalConstants(G=2.0)
    grid = build_grid(1, 16, 8.0)
    worst = 0.0
    for family, params in (("newtonian_mollified", {"sigma": 0.75}),
                           ("gaussian", {"ell": 2.0})):
        k = build_kernel(grid, family, consts, **params)
        d = spectral_decompose(k)
        scale = np.abs(k.weighted_matrix).max()
        worst = max(worst, d.reconstruction_error() / scale)
    return worst <= 1e-10, f"max reconstruction error {worst:.2e} (tol 1e-10)"


def _dissipation_psd(inject_fault):
    consts, _, _, _, space, _, cset = _small_system(G=2.0)
    sign = -1.0 if inject_fault == "flip_g_sign" else 1.0
    gen = lambda A: sign * lindblad_generator(A, "heisenberg", None, cset, consts)
    rng = np.random.Generator(np.random.Philox(key=np.array([11, 0], dtype=np.uint64)))
    worst = np.inf
    for _ in range(20):
        a = rng.standard_normal((space.dimension,) * 2) + 1j * rng.standard_normal(
            (space.dimension,) * 2)
        diss = gen(a.conj().T @ a) - gen(a.conj().T) @ a - a.conj().T @ gen(a)
        diss = 0.5 * (diss + diss.conj().T)
        worst = min(worst, float(np.linalg.eigvalsh(diss)[0]))
    return worst >= -1e-10, f"min dissipation eigenvalue {worst:.2e} (tol -1e-10)"


def _ito_identity():
    consts, grid, kern, decomp, space, family, cset = _small_system(
        n_sites=6, masses=(1.0, 2.0))
    report = ito_correction_check(cset, family, kern, consts)
    ok = report.max_deviation <= 1e-10 * report.scale
    return ok, (f"max |channel - self-energy| = {report.max_deviation:.2e} "
                f"(tol {1e-10 * report.scale:.2e})")


def _pure_density_equivalence():
    _, _, _, _, space, _, cset = _small_system(n_sites=6, G=2.0)
    psi0 = superposition(space.dimension, [(1, 1.0), (4, 1.0)])
    cfg = IntegrationConfig(dt=1e-8, n_steps=400, seed=2024, record_stride=40)
    pure = homodyne_trajectory(psi0, None, cset, cfg)
    dens = filter_homodyne(psi0, fresh_noise(), None, cset, cfg)
    gaps = [trace_distance(dens.states[i], np.outer(pure.states[i], pure.states[i].conj())) * 2
            for i in range(1, len(pure.times))]
    worst = max(gaps[i] / ((i + 1) * cfg.record_stride) for i in range(len(gaps)))
    return worst <= 1e-8, f"max per-step trace-norm gap {worst:.2e} (tol 1e-8)"


def _unraveling_smoke():
    _, _, _, _, space, _, cset = _small_system(G=4.0)
    psi0 = superposition(space.dimension, [(2, 1.0), (5, 1.0)])
    cfg = IntegrationConfig(dt=1e-3, n_steps=500, seed=7, record_stride=50)
    ens = run_ensemble("homodyne", psi0, None, cset, cfg, n_traj=128)
    ref_cfg = IntegrationConfig(dt=1e-4, n_steps=5000, seed=7,
                                record_stride=500, scheme="master_rk4")
    ref = master_evolve(psi0, None, cset, ref_cfg)
    dist = max(trace_distance(ens.mean_states[i], ref.states[i])
               for i in range(len(ens.times)))
    return dist <= 0.2, f"max ensemble-vs-master trace distance {dist:.3f} (tol 0.2, N=128)"


def run_selftest(inject_fault: str | None = None) -> list[CheckResult]:
    if inject_fault not in FAULT_MODES:
        raise ValueError(f"unknown fault mode {inject_fault!r}")
    return [
        _check("kernel_psd", _kernel_psd),
        _check("mercer_reconstruction", _mercer),
        _check("dissipation_psd", lambda: _dissipation_psd(inject_fault)),
        _check("ito_correction_identity", _ito_identity),
        _check("pure_density_equivalence", _pure_density_equivalence),
        _check("unraveling_smoke", _unraveling_smoke),
    ]
