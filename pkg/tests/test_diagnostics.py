import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfilter import (
    IntegrationConfig,
    MeasurementRecord,
    ValidationError,
    basis_state,
    coherence_decay_rate,
    collapse_statistics,
    ensemble_mean,
    homodyne_trajectory,
    innovation_whiteness,
    master_evolve,
    trace_distance,
)
from dpfilter.diagnostics import WhitenessThresholds, fidelity_to_pure
from conftest import make_system, two_site_state


# ---------------------------------------------------------------------------
# trace distance
# ---------------------------------------------------------------------------

def test_trace_distance_basics():
    a = np.diag([1.0, 0.0]).astype(complex)
    b = np.diag([0.0, 1.0]).astype(complex)
    assert trace_distance(a, a) == 0.0
    assert trace_distance(a, b) == pytest.approx(1.0)
    assert trace_distance(a, np.eye(2) / 2) == pytest.approx(0.5)


def test_fidelity_to_pure():
    psi = basis_state(3, 1)
    rho = np.diag([0.25, 0.5, 0.25]).astype(complex)
    assert fidelity_to_pure(psi, rho) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# ensemble mean
# ---------------------------------------------------------------------------

def test_ensemble_mean_duplicated_trajectory(small_system):
    cs = small_system["collapse"]
    cfg = IntegrationConfig(dt=1e-3, n_steps=100, seed=2, record_stride=10,
                            scheme="master_rk4")
    ref = master_evolve(two_site_state(8, 2, 5), None, cs, cfg)
    summary = ensemble_mean([ref, ref], ref)
    assert summary.max_trace_distance <= 1e-12
    assert summary.n_traj == 2


def test_ensemble_mean_mixes_pure_trajectories(small_system):
    cs = small_system["collapse"]
    cfg = IntegrationConfig(dt=1e-3, n_steps=100, seed=3, record_stride=10)
    t1 = homodyne_trajectory(two_site_state(8, 2, 5), None, cs, cfg)
    cfg2 = IntegrationConfig(dt=1e-3, n_steps=100, seed=3, trajectory_index=1,
                             record_stride=10)
    t2 = homodyne_trajectory(two_site_state(8, 2, 5), None, cs, cfg2)
    mcfg = IntegrationConfig(dt=1e-3, n_steps=100, record_stride=10,
                             scheme="master_rk4")
    ref = master_evolve(two_site_state(8, 2, 5), None, cs, mcfg)
    summary = ensemble_mean([t1, t2], ref)
    assert summary.mean_states.shape == (11, 8, 8)
    assert np.trace(summary.mean_states[-1]).real == pytest.approx(1.0, abs=1e-8)


def test_ensemble_mean_config_mismatch(small_system):
    cs = small_system["collapse"]
    cfg_a = IntegrationConfig(dt=1e-3, n_steps=100, seed=3, record_stride=10)
    cfg_b = IntegrationConfig(dt=2e-3, n_steps=100, seed=3, record_stride=10)
    t1 = homodyne_trajectory(two_site_state(8, 2, 5), None, cs, cfg_a)
    t2 = homodyne_trajectory(two_site_state(8, 2, 5), None, cs, cfg_b)
    mcfg = IntegrationConfig(dt=1e-3, n_steps=100, record_stride=10,
                             scheme="master_rk4")
    ref = master_evolve(two_site_state(8, 2, 5), None, cs, mcfg)
    with pytest.raises(ValidationError, match="mismatched"):
        ensemble_mean([t1, t2], ref)
    with pytest.raises(ValidationError, match="at least 2"):
        ensemble_mean([t1], ref)


# ---------------------------------------------------------------------------
# coherence decay
# ---------------------------------------------------------------------------

def test_decay_fit_matches_analytic(small_system):
    cs = small_system["collapse"]
    cfg = IntegrationConfig(dt=1e-3, n_steps=1000, record_stride=100,
                            scheme="master_rk4")
    traj = master_evolve(two_site_state(8, 2, 5), None, cs, cfg)
    fit = coherence_decay_rate(traj, 2, 5, cs)
    assert fit.relative_error <= 0.01


def test_decay_identical_sites_rate_zero(small_system):
    cs = small_system["collapse"]
    cfg = IntegrationConfig(dt=1e-3, n_steps=200, record_stride=20,
                            scheme="master_rk4")
    traj = master_evolve(two_site_state(8, 2, 5), None, cs, cfg)
    fit = coherence_decay_rate(traj, 2, 2, cs)
    assert fit.analytic_rate == 0.0
    assert fit.relative_error <= 1e-9   # fitted rate itself, population constant


def test_decay_rate_monotone_with_separation_to_saturation():
    cs = make_system(n_sites=16)["collapse"]
    lam = cs.dephasing_rates()
    s2 = cs.total_rate_diagonal()
    # interior pairs symmetric around the grid center (edges feel mollifier
    # leakage and fall off the bulk trend): rate grows with separation
    pairs = [(7, 8), (6, 9), (5, 10), (4, 11), (3, 12), (2, 13)]
    rates = [lam[a, b] for a, b in pairs]
    assert all(r2 > r1 for r1, r2 in zip(rates, rates[1:]))
    # saturation: the channel overlap dies off, leaving twice the single-site
    # rate s2/2; the widest pair is most of the way there and never beyond
    saturations = [0.5 * (s2[a] + s2[b]) for a, b in pairs]
    assert all(r <= sat + 1e-12 for r, sat in zip(rates, saturations))
    assert rates[-1] >= 0.8 * saturations[-1]


def test_decay_requires_visible_coherence(small_system):
    cs = small_system["collapse"]
    cfg = IntegrationConfig(dt=1e-3, n_steps=100, record_stride=10,
                            scheme="master_rk4")
    traj = master_evolve(basis_state(8, 2), None, cs, cfg)
    with pytest.raises(ValidationError, match="coherence"):
        coherence_decay_rate(traj, 2, 5, cs)


def test_decay_fit_invariant_under_stride(small_system):
    cs = small_system["collapse"]
    fits = []
    for stride in (50, 100):
        cfg = IntegrationConfig(dt=1e-3, n_steps=1000, record_stride=stride,
                                scheme="master_rk4")
        traj = master_evolve(two_site_state(8, 2, 5), None, cs, cfg)
        fits.append(coherence_decay_rate(traj, 2, 5, cs).fitted_rate)
    assert abs(fits[0] - fits[1]) <= 1e-3 * fits[0]


# ---------------------------------------------------------------------------
# Born statistics
# ---------------------------------------------------------------------------

def test_born_pure_basis_state():
    finals = np.tile(basis_state(6, 2), (50, 1))
    report = collapse_statistics(finals, basis_state(6, 2))
    assert report.n_counted == 50
    assert report.uncollapsed_fraction == 0.0
    assert report.observed.tolist() == [50.0]
    assert report.within(3.0)


def test_born_counts_uncollapsed_and_off_support():
    psi0 = two_site_state(6, 1, 4)
    finals = np.stack([
        basis_state(6, 1),
        basis_state(6, 4),
        two_site_state(6, 1, 4),          # fidelity 0.5: uncollapsed
        basis_state(6, 0),                # collapsed off the initial support
    ])
    report = collapse_statistics(finals, psi0)
    assert report.n_counted == 2
    assert report.uncollapsed_fraction == pytest.approx(0.25)
    assert report.off_support_count == 1


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 2.0 * np.pi))
def test_born_global_phase_invariance(phase):
    psi0 = two_site_state(6, 1, 4, wa=0.8)
    finals = np.stack([basis_state(6, 1) * np.exp(1j * phase),
                       basis_state(6, 4) * np.exp(-2j * phase)])
    report = collapse_statistics(finals, psi0)
    assert report.n_counted == 2
    assert report.observed.tolist() == [1.0, 1.0]


# ---------------------------------------------------------------------------
# innovation whiteness
# ---------------------------------------------------------------------------

def _wiener_record(n=20000, r=3, dt=1e-3, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    dw = scale * rng.standard_normal((n, r)) * np.sqrt(dt)
    return MeasurementRecord("homodyne", dt, dw, np.zeros((n, r)))


def test_whiteness_accepts_pure_wiener():
    report = innovation_whiteness(_wiener_record())
    assert report.passed


def test_whiteness_flags_mis_scaled_variance():
    report = innovation_whiteness(_wiener_record(scale=np.sqrt(1.2)))
    assert not report.passed
    assert any(abs(c.variance_z) > report.thresholds.variance for c in report.channels)
    assert all(abs(c.mean_z) <= report.thresholds.mean for c in report.channels)


def test_whiteness_flags_autocorrelation():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal((20001, 2))
    smoothed = (raw[1:] + raw[:-1]) / np.sqrt(2.0)   # lag-1 correlated
    rec = MeasurementRecord("homodyne", 1e-3, smoothed * np.sqrt(1e-3),
                            np.zeros_like(smoothed))
    report = innovation_whiteness(rec)
    assert any(abs(c.lag1_z) > report.thresholds.lag1 for c in report.channels)


def test_whiteness_input_validation():
    with pytest.raises(ValidationError, match="homodyne"):
        innovation_whiteness(MeasurementRecord("counting", 1e-3,
                                               np.zeros((2000, 2)), np.zeros((2000, 2))))
    with pytest.raises(ValidationError, match="1000"):
        innovation_whiteness(_wiener_record(n=500))
    report = innovation_whiteness(_wiener_record(n=3000), burn_in=1500)
    assert report.n_steps == 1500


def test_whiteness_thresholds_applied():
    report = innovation_whiteness(_wiener_record(seed=5),
                                  thresholds=WhitenessThresholds(4, 4, 4, 4))
    assert report.thresholds.variance == 4.0
    assert report.passed
