"""Ensemble statistics, decoherence-rate fits, Born statistics, whiteness tests.

Every pass/fail threshold here is expressed in sigmas of an explicit null
distribution (binomial for Born bins, Wishart moments for covariances,
1/√n for correlations), never as a bare constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dynamics import MeasurementRecord, Trajectory, state_populations
from .ensemble import EnsembleResult
from .errors import ValidationError
from .quantum_ops import CollapseSet


def trace_distance(rho_a: np.ndarray, rho_b: np.ndarray) -> float:
    """½‖ρ_a - ρ_b‖₁ via the eigenvalues of the Hermitian difference."""
    diff = rho_a - rho_b
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


def fidelity_to_pure(psi: np.ndarray, rho: np.ndarray) -> float:
    return float((psi.conj() @ rho @ psi).real)


# ---------------------------------------------------------------------------
# ensemble mean vs. master reference
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EnsembleSummary:
    n_traj: int
    times: np.ndarray
    mean_states: np.ndarray
    trace_distance_to_reference: np.ndarray
    observable_means: dict[str, np.ndarray]
    observable_stderr: dict[str, np.ndarray]

    @property
    def max_trace_distance(self) -> float:
        return float(self.trace_distance_to_reference.max())


def _mean_from_trajectories(trajectories) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    first = trajectories[0]
    for t in trajectories[1:]:
        if (t.config.dt != first.config.dt or t.config.n_steps != first.config.n_steps
                or t.config.record_stride != first.config.record_stride
                or t.states.shape != first.states.shape):
            raise ValidationError("trajectories have mismatched configurations")
    dims = first.states.shape[1]
    n_rec = len(first.times)
    mean = np.zeros((n_rec, dims, dims), dtype=complex)
    var_samples = np.zeros((n_rec, len(trajectories)))
    for k, t in enumerate(trajectories):
        if t.kind == "pure":
            mean += np.einsum("ti,tj->tij", t.states, t.states.conj())
        else:
            mean += t.states
        var_samples[:, k] = t.observables.get("pos_var", np.zeros(n_rec))
    mean /= len(trajectories)
    return mean, var_samples, first.times


def ensemble_mean(trajectories, master_reference: Trajectory) -> EnsembleSummary:
    """Mean conditioned state against the deterministic master solution.

    Accepts a list of trajectories (>= 2, identical configs) or an
    :class:`EnsembleResult`; the reference must be recorded at the same times.
    """
    if isinstance(trajectories, EnsembleResult):
        mean = trajectories.mean_states
        var_samples = trajectories.position_variance.copy()
        times = trajectories.times
        n_traj = trajectories.n_traj
    else:
        trajectories = list(trajectories)
        if len(trajectories) < 2:
            raise ValidationError("ensemble_mean needs at least 2 trajectories")
        mean, var_samples, times = _mean_from_trajectories(trajectories)
        n_traj = len(trajectories)

    if len(master_reference.times) != len(times) or not np.allclose(
            master_reference.times, times, rtol=1e-12, atol=1e-12):
        raise ValidationError("reference trajectory is recorded at different times")
    dist = np.array([trace_distance(mean[i], master_reference.states[i])
                     for i in range(len(times))])
    n = var_samples.shape[1]
    means = {"pos_var": var_samples.mean(axis=1)}
    stderr = {"pos_var": var_samples.std(axis=1, ddof=1) / np.sqrt(n) if n > 1
              else np.zeros(len(times))}
    return EnsembleSummary(n_traj=n_traj, times=times, mean_states=mean,
                           trace_distance_to_reference=dist,
                           observable_means=means, observable_stderr=stderr)


# ---------------------------------------------------------------------------
# coherence decay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    fitted_rate: float
    analytic_rate: float
    relative_error: float
    n_points: int


def coherence_decay_rate(master_trajectory: Trajectory, b1: int, b2: int,
                         collapse: CollapseSet) -> DecayFit:
    """Least-squares exponential fit of |ρ_{b1,b2}(t)| against the analytic
    position-dephasing rate ½Σ_a(ℓ_a(b1)-ℓ_a(b2))².

    Requires an H = 0 master run whose initial state has coherence between
    the two basis states.  For b1 == b2 the analytic rate is zero and the
    (absolute) fitted rate is reported as the error.
    """
    if master_trajectory.kind != "mixed":
        raise ValidationError("coherence decay needs a density-matrix trajectory")
    coh = np.abs(master_trajectory.states[:, b1, b2])
    if coh.min() < 1e-12:
        raise ValidationError(
            "coherence falls below 1e-12 inside the fit window; shorten the run")
    slope = np.polyfit(master_trajectory.times, np.log(coh), 1)[0]
    fitted = -float(slope)
    analytic = float(collapse.dephasing_rates()[b1, b2])
    rel = abs(fitted - analytic) / analytic if analytic > 0 else abs(fitted)
    return DecayFit(fitted_rate=fitted, analytic_rate=analytic,
                    relative_error=rel, n_points=len(coh))


# ---------------------------------------------------------------------------
# Born statistics of collapsed ensembles
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BornReport:
    bins: np.ndarray                 # basis indices carrying initial weight
    observed: np.ndarray             # collapsed-trajectory counts per bin
    expected: np.ndarray             # n_counted * weight
    sigma: np.ndarray                # binomial std per bin
    deviations_sigma: np.ndarray     # |observed - expected| / sigma
    uncollapsed_fraction: float
    off_support_count: int
    chi2_pvalue: float
    n_counted: int

    def within(self, n_sigma: float = 3.0) -> bool:
        return bool((self.deviations_sigma <= n_sigma).all())


def collapse_statistics(final_states, psi0, fidelity_threshold: float = 0.99) -> BornReport:
    """Classify final pure states to their dominant basis state and compare
    the histogram with the initial-state weights |ψ₀(x)|².

    A trajectory counts as collapsed when its largest basis population is at
    least ``fidelity_threshold``; classification is insensitive to global
    phase by construction.
    """
    states = np.asarray(final_states, dtype=complex)
    if states.ndim != 2:
        raise ValidationError("final_states must be an (n_traj, dim) array of pure states")
    psi0 = np.asarray(psi0, dtype=complex)
    weights = np.abs(psi0) ** 2
    weights = weights / weights.sum()
    support = np.nonzero(weights > 1e-12)[0]

    pops = state_populations(states, "pure")
    best = pops.argmax(axis=1)
    fidelity = pops.max(axis=1)
    collapsed = fidelity >= fidelity_threshold
    on_support = np.isin(best, support)
    counted = collapsed & on_support
    n_counted = int(counted.sum())
    off_support = int((collapsed & ~on_support).sum())

    observed = np.array([(best[counted] == b).sum() for b in support], dtype=float)
    p = weights[support] / weights[support].sum()
    expected = n_counted * p
    sigma = np.sqrt(np.maximum(n_counted * p * (1.0 - p), 1e-300))
    dev = np.abs(observed - expected) / sigma
    if n_counted > 0 and len(support) > 1:
        chi2_pvalue = float(stats.chisquare(observed, f_exp=expected).pvalue)
    else:
        chi2_pvalue = 1.0
    return BornReport(bins=support, observed=observed, expected=expected,
                      sigma=sigma, deviations_sigma=dev,
                      uncollapsed_fraction=1.0 - collapsed.mean(),
                      off_support_count=off_support,
                      chi2_pvalue=chi2_pvalue, n_counted=n_counted)


# ---------------------------------------------------------------------------
# innovation whiteness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhitenessThresholds:
    """Sigma levels per statistic (mean z, variance ratio, lag-1, cross)."""
    mean: float = 4.0
    variance: float = 5.0
    lag1: float = 4.0
    cross: float = 5.0


@dataclass(eq=False)
class ChannelWhiteness:
    mean_z: float
    variance_ratio: float
    variance_z: float
    lag1_autocorr: float
    lag1_z: float
    passed: bool


@dataclass(eq=False)
class WhitenessReport:
    channels: list[ChannelWhiteness]
    cross_max_corr: float
    cross_z: float
    cross_passed: bool
    n_steps: int
    thresholds: WhitenessThresholds

    @property
    def passed(self) -> bool:
        return self.cross_passed and all(c.passed for c in self.channels)

    def to_json(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "passed": self.passed,
            "cross_max_corr": self.cross_max_corr,
            "cross_z": self.cross_z,
            "channels": [{
                "mean_z": c.mean_z, "variance_ratio": c.variance_ratio,
                "variance_z": c.variance_z, "lag1_autocorr": c.lag1_autocorr,
                "lag1_z": c.lag1_z, "passed": c.passed,
            } for c in self.channels],
            "thresholds": {"mean": self.thresholds.mean, "variance": self.thresholds.variance,
                           "lag1": self.thresholds.lag1, "cross": self.thresholds.cross},
        }


def whiteness_text_table(report: WhitenessReport) -> str:
    th = report.thresholds
    lines = [
        f"innovation whiteness over {report.n_steps} steps: "
        f"{'PASS' if report.passed else 'FAIL'}",
        f"{'ch':>3} {'mean_z':>8} {'var_ratio':>10} {'var_z':>8} "
        f"{'lag1':>8} {'lag1_z':>8}  verdict",
    ]
    for a, c in enumerate(report.channels):
        lines.append(
            f"{a:>3} {c.mean_z:>8.2f} {c.variance_ratio:>10.4f} {c.variance_z:>8.2f} "
            f"{c.lag1_autocorr:>8.4f} {c.lag1_z:>8.2f}  "
            f"{'ok' if c.passed else 'FAIL'}")
    lines.append(
        f"cross-channel max |corr| = {report.cross_max_corr:.5f} "
        f"(z = {report.cross_z:.2f}, limit {th.cross:g} sigma): "
        f"{'ok' if report.cross_passed else 'FAIL'}")
    lines.append(f"limits: mean {th.mean:g}, variance {th.variance:g}, "
                 f"lag-1 {th.lag1:g}, cross {th.cross:g} sigma")
    return "\n".join(lines) + "\n"


def born_text_table(report: BornReport) -> str:
    lines = [
        f"collapse statistics: {report.n_counted} counted trajectories, "
        f"uncollapsed fraction {report.uncollapsed_fraction:.4f}, "
        f"off-support {report.off_support_count}, "
        f"chi-square p = {report.chi2_pvalue:.4f}",
        f"{'site':>6} {'observed':>9} {'expected':>10} {'sigma':>8} {'dev/sigma':>10}",
    ]
    for i, b in enumerate(report.bins):
        lines.append(f"{b:>6} {report.observed[i]:>9.0f} {report.expected[i]:>10.1f} "
                     f"{report.sigma[i]:>8.2f} {report.deviations_sigma[i]:>10.2f}")
    return "\n".join(lines) + "\n"


def innovation_whiteness(record: MeasurementRecord,
                         thresholds: WhitenessThresholds | None = None,
                         burn_in: int = 0) -> WhitenessReport:
    """Test that homodyne innovations are N(0, dt) white noise.

    Per channel: mean z-score, sample-variance ratio against dt (null std
    √(2/(n-1))), lag-1 autocorrelation (null std 1/√n); across channels the
    largest pairwise correlation.  ``burn_in`` steps are discarded first so a
    replayed filter is judged only after it has locked on.
    """
    if record.kind != "homodyne":
        raise ValidationError("whiteness tests apply to homodyne (diffusive) records")
    th = thresholds or WhitenessThresholds()
    x = record.innovations[burn_in:]
    n, r = x.shape
    if n < 1000:
        raise ValidationError(f"whiteness needs >= 1000 steps after burn-in, got {n}")
    dt = record.dt

    channels = []
    for a in range(r):
        xa = x[:, a]
        mean_z = float(xa.sum() / np.sqrt(n * dt))
        v = float(xa.var(ddof=1))
        ratio = v / dt
        var_z = (ratio - 1.0) / np.sqrt(2.0 / (n - 1))
        centered = xa - xa.mean()
        lag1 = float((centered[:-1] * centered[1:]).sum() / ((n - 1) * v))
        lag1_z = lag1 * np.sqrt(n)
        ok = (abs(mean_z) <= th.mean and abs(var_z) <= th.variance
              and abs(lag1_z) <= th.lag1)
        channels.append(ChannelWhiteness(mean_z=mean_z, variance_ratio=ratio,
                                         variance_z=float(var_z), lag1_autocorr=lag1,
                                         lag1_z=float(lag1_z), passed=bool(ok)))
    if r > 1:
        corr = np.corrcoef(x.T)
        off = corr[~np.eye(r, dtype=bool)]
        cross = float(np.abs(off).max())
    else:
        cross = 0.0
    cross_z = cross * np.sqrt(n)
    cross_ok = cross_z <= th.cross
    return WhitenessReport(channels=channels, cross_max_corr=cross,
                           cross_z=float(cross_z), cross_passed=bool(cross_ok),
                           n_steps=n, thresholds=th)
