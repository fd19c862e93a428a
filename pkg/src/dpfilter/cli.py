"""Command-line orchestration.

Subcommands: kernel-check, decohere, filter, jump, ensemble, selftest.
All physics comes from the JSON config; flags pick the subcommand, config
path, output directory, thread count, and strictness.  ``DPFILTER_SEED``
overrides the config seed (recorded in the manifest).  Every emitted file is
listed in ``manifest.json`` with its content hash.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, ModelBundle, build_model
from .diagnostics import (
    born_text_table,
    coherence_decay_rate,
    collapse_statistics,
    fidelity_to_pure,
    innovation_whiteness,
    trace_distance,
    whiteness_text_table,
)
from .dynamics import (
    IntegrationConfig,
    Trajectory,
    filter_counting,
    filter_homodyne,
    homodyne_trajectory,
    master_evolve,
    maximally_mixed,
    replay,
    state_populations,
    trajectory_observables,
)
from .ensemble import run_ensemble
from .errors import DPFilterError, SizingError, ValidationError
from .kernel import gamma_square_root_check
from .serialize import sha256_file, write_csv, write_json

SQUARE_ROOT_TOL = 1e-6


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

class OutputDir:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def register(self, name: str) -> Path:
        self.files.append(name)
        return self.path / name

    def write_manifest(self, cfg: ExperimentConfig | None, args, seed, seed_source):
        manifest = {
            "tool": "dpfilter",
            "version": __version__,
            "subcommand": args.command,
            "config_sha256": cfg.sha256 if cfg else None,
            "seed": seed,
            "seed_source": seed_source,
            "threads": getattr(args, "threads", 1),
            "strict": bool(getattr(args, "strict", False)),
            "versions": {
                "python": sys.version.split()[0],
                "numpy": np.__version__,
            },
            "files": {name: sha256_file(self.path / name) for name in self.files},
        }
        write_json(self.path / "manifest.json", manifest)


def _resolve_out(args, cfg: ExperimentConfig | None) -> OutputDir:
    out = args.out or (cfg.outputs.get("directory") if cfg else None)
    if not out:
        raise ValidationError("no output directory: pass --out or set outputs.directory")
    return OutputDir(Path(out))


def _apply_seed_override(cfg: ExperimentConfig) -> tuple[int, str]:
    env = os.environ.get("DPFILTER_SEED")
    if env is None:
        return cfg.seed, "config"
    try:
        seed = int(env)
    except ValueError as exc:
        raise ValidationError(f"DPFILTER_SEED must be an integer, got {env!r}") from exc
    cfg.raw["run"]["seed"] = seed
    return seed, "env"


def _integration_config(cfg: ExperimentConfig, scheme="euler_maruyama_renorm",
                        trajectory_index=0) -> IntegrationConfig:
    run = cfg.run
    return IntegrationConfig(
        dt=float(run["dt"]), n_steps=int(run["n_steps"]), scheme=scheme,
        seed=int(run["seed"]), trajectory_index=trajectory_index,
        record_stride=int(run.get("record_stride", 1)))


# ---------------------------------------------------------------------------
# observable columns
# ---------------------------------------------------------------------------

def _coherence_pair(cfg: ExperimentConfig, bundle: ModelBundle) -> tuple[int, int] | None:
    pair = cfg.outputs.get("coherence_pair")
    if pair:
        b1, b2 = int(pair[0]), int(pair[1])
    else:
        weights = np.abs(bundle.initial_vector) ** 2
        order = np.argsort(weights)[::-1]
        if len(order) < 2 or weights[order[1]] < 1e-12:
            return None
        b1, b2 = int(order[0]), int(order[1])
    dim = bundle.space.dimension
    if not (0 <= b1 < dim and 0 <= b2 < dim) or b1 == b2:
        raise ValidationError(f"config invalid at outputs.coherence_pair: {pair}")
    return b1, b2


def trajectory_columns(traj: Trajectory, bundle: ModelBundle,
                       names) -> tuple[list[str], list[np.ndarray]]:
    base = trajectory_observables(traj, bundle.collapse)
    pops = state_populations(traj.states, traj.kind)
    headers, columns = ["time"], [traj.times]
    for name in names:
        if name in base:
            col = base[name]
        elif name.startswith("pop:"):
            col = pops[:, int(name.split(":")[1])]
        elif name.startswith("coh:"):
            _, s1, s2 = name.split(":")
            b1, b2 = int(s1), int(s2)
            if traj.kind == "pure":
                col = np.abs(traj.states[:, b1] * traj.states[:, b2].conj())
            else:
                col = np.abs(traj.states[:, b1, b2])
        else:
            raise ValidationError(f"unknown observable column {name!r}")
        headers.append(name)
        columns.append(col)
    return headers, columns


def _write_trajectory_csv(path, traj, bundle, names, extra=()):
    headers, columns = trajectory_columns(traj, bundle, names)
    for name, col in extra:
        headers.append(name)
        columns.append(col)
    write_csv(path, headers, columns)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_kernel_check(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seed, seed_source = _apply_seed_override(cfg)
    out = _resolve_out(args, cfg)
    bundle = build_model(cfg, strict=args.strict)
    check = gamma_square_root_check(bundle.constants, cfg.r_samples(), cfg.quad_spec())

    rows = check.samples
    write_csv(out.register("square_root_check.csv"),
              ["r", "inner_integral", "outer_integral", "inner_deviation",
               "outer_deviation", "assembled", "expected", "relative_error"],
              [np.array([getattr(s, f) for s in rows]) for f in
               ("r", "inner_integral", "outer_integral", "inner_deviation",
                "outer_deviation", "assembled", "expected", "relative_error")])
    write_json(out.register("kernel.json"), bundle.decomposition.to_json())
    write_json(out.register("kernel_check_report.json"), {
        "max_integral_deviation": check.max_integral_deviation,
        "max_relative_error": check.max_relative_error,
        "refinement_delta": check.refinement_delta,
        "tail_remainder_bound": check.tail_remainder_bound,
        "tolerance": SQUARE_ROOT_TOL,
        "passed": check.passed(SQUARE_ROOT_TOL),
        "reconstruction_error": bundle.decomposition.reconstruction_error(),
        "orthonormality_error": bundle.decomposition.orthonormality_error(),
        "clipped_mass": bundle.decomposition.clipped_mass,
        "rank": bundle.decomposition.rank,
    })
    out.write_manifest(cfg, args, seed, seed_source)
    ok = check.passed(SQUARE_ROOT_TOL)
    print(f"{'PASS' if ok else 'FAIL'} square-root identity: "
          f"max integral deviation {check.max_integral_deviation:.3e}, "
          f"max relative error {check.max_relative_error:.3e} (tol {SQUARE_ROOT_TOL:g})")
    return 0 if ok else 1


def cmd_decohere(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seed, seed_source = _apply_seed_override(cfg)
    out = _resolve_out(args, cfg)
    bundle = build_model(cfg, strict=args.strict)
    icfg = _integration_config(cfg, scheme="master_rk4")
    traj = master_evolve(bundle.initial_vector, bundle.hamiltonian,
                         bundle.collapse, icfg)
    pair = _coherence_pair(cfg, bundle)
    names = cfg.outputs.get("observables") or ["trace_drift", "purity", "pos_var"]
    if pair is not None:
        names = list(names) + [f"coh:{pair[0]}:{pair[1]}"]
    _write_trajectory_csv(out.register("master_trajectory.csv"), traj, bundle, names)
    if pair is not None and cfg.raw.get("hamiltonian", {"kind": "zero"})["kind"] == "zero":
        fit = coherence_decay_rate(traj, pair[0], pair[1], bundle.collapse)
        write_json(out.register("decay_fit.json"), {
            "pair": list(pair),
            "fitted_rate": fit.fitted_rate,
            "analytic_rate": fit.analytic_rate,
            "relative_error": fit.relative_error,
            "n_points": fit.n_points,
        })
        print(f"coherence decay: fitted {fit.fitted_rate:.6g}, analytic "
              f"{fit.analytic_rate:.6g}, relative error {fit.relative_error:.3e}")
    out.write_manifest(cfg, args, seed, seed_source)
    return 0


def cmd_filter(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seed, seed_source = _apply_seed_override(cfg)
    out = _resolve_out(args, cfg)
    bundle = build_model(cfg, strict=args.strict)
    icfg = _integration_config(cfg)
    truth = homodyne_trajectory(bundle.initial_vector, bundle.hamiltonian,
                                bundle.collapse, icfg)
    fcfg = cfg.raw.get("filter", {})
    if fcfg.get("initial", "maximally_mixed") == "maximally_mixed":
        rho0 = maximally_mixed(bundle.space.dimension)
    else:
        rho0 = bundle.initial_vector
    filt = filter_homodyne(rho0, replay(truth.record), bundle.hamiltonian,
                           bundle.collapse, icfg)

    names = cfg.outputs.get("observables") or ["purity", "pos_mean", "pos_var"]
    _write_trajectory_csv(out.register("truth_trajectory.csv"), truth, bundle,
                          ["norm_drift"] + list(names))
    psi_final = truth.final_state
    fid = np.array([fidelity_to_pure(psi_final, filt.states[i])
                    for i in range(len(filt.times))])
    _write_trajectory_csv(out.register("filter_trajectory.csv"), filt, bundle,
                          ["trace_drift"] + list(names), extra=[("fidelity", fid)])
    truth.record.to_jsonl(out.register("record.jsonl"))

    burn_in = int(fcfg.get("burn_in_steps", icfg.n_steps // 5))
    report = innovation_whiteness(filt.record, burn_in=burn_in)
    payload = report.to_json()
    payload["burn_in_steps"] = burn_in
    write_json(out.register("whiteness.json"), payload)
    with open(out.register("whiteness.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(whiteness_text_table(report))

    innov = filt.record.innovations[burn_in:] / np.sqrt(icfg.dt)
    times = (np.arange(burn_in, icfg.n_steps)) * icfg.dt
    write_csv(out.register("innovations.csv"),
              ["time"] + [f"z_{a}" for a in range(innov.shape[1])],
              [times] + [innov[:, a] for a in range(innov.shape[1])])
    out.write_manifest(cfg, args, seed, seed_source)
    print(f"filter replay: final fidelity {fid[-1]:.6f}, whiteness "
          f"{'PASS' if report.passed else 'FAIL'} over {report.n_steps} steps")
    return 0


def cmd_jump(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seed, seed_source = _apply_seed_override(cfg)
    out = _resolve_out(args, cfg)
    bundle = build_model(cfg, strict=args.strict)
    icfg = _integration_config(cfg)
    traj = filter_counting(bundle.initial_vector, bundle.hamiltonian,
                           bundle.collapse, icfg)
    names = cfg.outputs.get("observables") or ["purity", "pos_mean", "pos_var"]
    _write_trajectory_csv(out.register("jump_trajectory.csv"), traj, bundle,
                          ["trace_drift"] + list(names))
    traj.record.to_jsonl(out.register("jump_record.jsonl"))
    expected = traj.record.expected_signal.sum(axis=0) * icfg.dt
    write_json(out.register("jump_summary.json"), {
        "jump_counts": traj.log["jump_counts"],
        "expected_counts": expected,
        "suppressed_jumps": traj.log["suppressed_jumps"],
        "total_jumps": int(np.asarray(traj.log["jump_counts"]).sum()),
    })
    out.write_manifest(cfg, args, seed, seed_source)
    print(f"jump run: {int(np.asarray(traj.log['jump_counts']).sum())} jumps "
          f"across {bundle.collapse.rank} channels")
    return 0


def cmd_ensemble(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seed, seed_source = _apply_seed_override(cfg)
    out = _resolve_out(args, cfg)
    bundle = build_model(cfg, strict=args.strict)
    icfg = _integration_config(cfg)
    mode = cfg.run.get("mode", "homodyne")
    n_traj = int(cfg.run.get("n_traj", 1))

    ens = run_ensemble(mode, bundle.initial_vector, bundle.hamiltonian,
                       bundle.collapse, icfg, n_traj, threads=args.threads)
    ref_cfg = IntegrationConfig(dt=icfg.dt / 10.0, n_steps=icfg.n_steps * 10,
                                scheme="master_rk4", seed=icfg.seed,
                                record_stride=icfg.record_stride * 10)
    ref = master_evolve(bundle.initial_vector, bundle.hamiltonian,
                        bundle.collapse, ref_cfg)
    dist = np.array([trace_distance(ens.mean_states[i], ref.states[i])
                     for i in range(len(ens.times))])

    n = ens.position_variance.shape[1]
    write_csv(out.register("ensemble_summary.csv"),
              ["time", "trace_distance", "mean_pos_var", "sem_pos_var"],
              [ens.times, dist, ens.position_variance.mean(axis=1),
               ens.position_variance.std(axis=1, ddof=1) / np.sqrt(n)])

    k = min(int(cfg.outputs.get("variance_sample", 20)), n_traj)
    if k > 0:
        write_csv(out.register("variance_trajectories.csv"),
                  ["time"] + [f"var_{i:03d}" for i in range(k)],
                  [ens.times] + [ens.position_variance[:, i] for i in range(k)])

    report = {
        "mode": mode,
        "n_traj": n_traj,
        "max_trace_distance": float(dist.max()),
        "final_trace_distance": float(dist[-1]),
        "mean_final_pos_var": float(ens.position_variance[-1].mean()),
    }
    if mode == "counting":
        report["mean_jump_counts"] = ens.jump_counts.mean(axis=0)
    if (mode == "homodyne"
            and cfg.raw.get("hamiltonian", {"kind": "zero"})["kind"] == "zero"):
        born = collapse_statistics(ens.final_states, bundle.initial_vector)
        with open(out.register("born.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(born_text_table(born))
        report["born"] = {
            "bins": born.bins,
            "observed": born.observed,
            "expected": born.expected,
            "sigma": born.sigma,
            "deviations_sigma": born.deviations_sigma,
            "uncollapsed_fraction": born.uncollapsed_fraction,
            "chi2_pvalue": born.chi2_pvalue,
            "n_counted": born.n_counted,
        }
    write_json(out.register("ensemble_report.json"), report)
    out.write_manifest(cfg, args, seed, seed_source)
    print(f"ensemble ({mode}, N={n_traj}): max trace distance to master "
          f"{dist.max():.4f}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    fault = args.inject_fault.replace("-", "_") if args.inject_fault else None
    results = run_selftest(inject_fault=fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  "
              f"[{r.elapsed:.2f}s]")
    ok = all(r.passed for r in results)
    if args.out:
        out = OutputDir(Path(args.out))
        write_json(out.register("selftest_report.json"), {
            "passed": ok,
            "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail}
                       for r in results],
        })
        out.write_manifest(None, args, None, None)
    print(f"selftest: {'all checks passed' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfilter",
        description="Gravitational-decoherence quantum filtering laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for trajectory ensembles")
        p.add_argument("--strict", action="store_true",
                       help="escalate kernel-repair warnings to errors")

    for name, fn, help_text in (
            ("kernel-check", cmd_kernel_check, "verify the square-root identity and export the kernel"),
            ("decohere", cmd_decohere, "deterministic master-equation run"),
            ("filter", cmd_filter, "homodyne trajectory, record replay, innovation whiteness"),
            ("jump", cmd_jump, "number-counting jump-filter trajectory"),
            ("ensemble", cmd_ensemble, "trajectory ensemble vs master reference")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("selftest", help="bundled miniature acceptance suite")
    common(p, needs_config=False)
    p.add_argument("--inject-fault", choices=["flip-g-sign"], default=None,
                   help="deliberately break an identity (harness testing)")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SizingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: shrink the grid or particle count, or raise the caps "
              "section (caps.grid_sites / caps.hilbert_dimension) in the config",
              file=sys.stderr)
        return 2
    except DPFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
