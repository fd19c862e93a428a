import numpy as np
import pytest

from dpfilter import (
    Operator,
    ParticleSpec,
    PhysicalConstants,
    SizingError,
    ValidationError,
    build_grid,
    build_kernel,
    build_space,
    collapse_set,
    dissipation,
    hamiltonian,
    ito_correction_check,
    lindblad_generator,
    mass_density_family,
    self_energy,
    spectral_decompose,
)
from dpfilter.quantum_ops import CollapseSet
from conftest import make_system


# ---------------------------------------------------------------------------
# Hilbert spaces
# ---------------------------------------------------------------------------

def test_space_single_particle():
    g = build_grid(1, 8, 4.0)
    sp = build_space([ParticleSpec(1.0, g)])
    assert sp.dimension == 8
    assert sp.basis_label(3) == (3,)


def test_space_product_labels():
    g8, g4 = build_grid(1, 8, 4.0), build_grid(1, 4, 2.0)
    sp = build_space([(1.0, g8), (2.0, g4)])
    assert sp.dimension == 32
    for b in range(32):
        assert sp.basis_index(sp.basis_label(b)) == b
    assert sp.basis_label(0) == (0, 0)
    assert sp.basis_label(1) == (0, 1)   # last particle varies fastest


def test_space_cap():
    g = build_grid(1, 40, 20.0)
    with pytest.raises(SizingError, match="1600"):
        build_space([(1.0, g), (1.0, g)])


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def test_operator_flags_validated():
    with pytest.raises(ValidationError):
        Operator(np.array([[0.0, 1.0], [0.0, 0.0]]), hermitian=True)
    with pytest.raises(ValidationError):
        Operator(np.array([[1.0, 0.5], [0.5, 1.0]]), diagonal=True)
    with pytest.raises(ValidationError):
        Operator(np.zeros((2, 3)))


def test_operator_json_roundtrip():
    m = np.array([[1.0, 2.0 - 1.0j], [2.0 + 1.0j, -1.0]])
    op = Operator(m, hermitian=True)
    back = Operator.from_json(op.to_json())
    assert np.array_equal(back.matrix, op.matrix)
    assert back.hermitian


# ---------------------------------------------------------------------------
# mass-density observables
# ---------------------------------------------------------------------------

def test_mass_density_peaks_at_particle_site(small_system):
    fam = small_system["family"]
    for b in range(8):
        assert fam.profiles[:, b].argmax() == b


def test_mass_density_total_mass_interior(small_system):
    fam, grid = small_system["family"], small_system["grid"]
    sums = grid.cell_weight * fam.profiles.sum(axis=0)
    # all configurations within the reported leakage bound
    assert np.abs(sums - fam.total_mass).max() <= fam.normalization_tolerance + 1e-12
    # interior configuration much tighter than the boundary-dominated bound
    interior = int(np.argmin(np.abs(grid.positions[:, 0])))
    assert abs(sums[interior] - fam.total_mass) < 0.05 * fam.total_mass


def test_mass_density_additivity():
    g = build_grid(1, 8, 4.0)
    sp2 = build_space([(1.0, g), (2.0, g)])
    fam2 = mass_density_family(sp2, g, 1.0)
    sp1 = build_space([(1.0, g)])
    fam1 = mass_density_family(sp1, g, 1.0)
    for b in range(sp2.dimension):
        ja, jb = sp2.basis_label(b)
        expected = fam1.profiles[:, ja] + 2.0 * fam1.profiles[:, jb]
        np.testing.assert_allclose(fam2.profiles[:, b], expected, rtol=1e-12)


def test_mass_density_mollifier_resolution_guard():
    g = build_grid(1, 8, 4.0)
    sp = build_space([(1.0, g)])
    with pytest.raises(ValidationError, match="half the lattice spacing"):
        mass_density_family(sp, g, 0.4)


def test_mass_density_grid_mismatch():
    g = build_grid(1, 8, 4.0)
    other = build_grid(1, 8, 5.0)
    sp = build_space([(1.0, g)])
    with pytest.raises(ValidationError, match="different lattice"):
        mass_density_family(sp, other, 1.0)


def test_mass_density_operators_diagonal_nonnegative(small_system):
    fam = small_system["family"]
    assert (fam.profiles >= 0.0).all()
    op = fam.operator(3)
    assert op.diagonal and op.hermitian


# ---------------------------------------------------------------------------
# collapse channels
# ---------------------------------------------------------------------------

def test_collapse_identity_kernel_per_site_channels():
    # identity kernel: one channel per site, L_a = sqrt(w/hbar) * site observable
    consts = PhysicalConstants(hbar=2.0)
    g = build_grid(1, 2, 1.0)
    k = build_kernel(g, "custom", consts, matrix=np.eye(2))
    d = spectral_decompose(k)
    sp = build_space([(1.0, g)])
    fam = mass_density_family(sp, g, 0.6)
    cs = collapse_set(fam, d, consts)
    scale = np.sqrt(g.cell_weight / consts.hbar)
    for a in range(2):
        site = int(np.abs(d.modes[a]).argmax())
        np.testing.assert_allclose(cs.diagonals[a], scale * fam.profiles[site],
                                   rtol=1e-12, atol=1e-14)


def test_collapse_scaling_with_coupling():
    sys1 = make_system(G=2.0)
    sys2 = make_system(G=4.0)
    np.testing.assert_allclose(sys2["collapse"].diagonals,
                               np.sqrt(2.0) * sys1["collapse"].diagonals, rtol=1e-10)


def test_collapse_matches_direct_assembly(small_system):
    # oracle: assemble each channel operator from its definition, site by site
    cs, d, fam = small_system["collapse"], small_system["decomp"], small_system["family"]
    consts, grid = small_system["constants"], small_system["grid"]
    for a in range(cs.rank):
        direct = np.zeros((8, 8), dtype=complex)
        for j in range(grid.n_sites):
            direct += (np.sqrt(d.eigenvalues[a] / consts.hbar) * np.sqrt(grid.cell_weight)
                       * d.modes[a, j] * fam.operator(j).matrix)
        np.testing.assert_allclose(cs.operator(a).matrix, direct, rtol=0, atol=1e-12)


def test_collapse_rejects_rank_zero():
    consts = PhysicalConstants()
    g = build_grid(1, 2, 1.0)
    k = build_kernel(g, "custom", consts, matrix=np.zeros((2, 2)))
    d = spectral_decompose(k)
    sp = build_space([(1.0, g)])
    fam = mass_density_family(sp, g, 0.6)
    with pytest.raises(ValidationError, match="no decoherence channels"):
        collapse_set(fam, d, consts)


def test_collapse_grid_mismatch():
    sys_a = make_system(n_sites=8)
    sys_b = make_system(n_sites=6)
    with pytest.raises(ValidationError, match="different grids"):
        collapse_set(sys_a["family"], sys_b["decomp"], sys_a["constants"])


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------

def test_hamiltonian_zero(small_system):
    h = hamiltonian(small_system["space"], "zero")
    assert np.abs(h.matrix).max() == 0.0


def test_hamiltonian_free_open_chain():
    g = build_grid(1, 4, 2.0)
    sp = build_space([(1.0, g)])
    h = hamiltonian(sp, "free", hopping=1.0).matrix.real
    np.testing.assert_allclose(np.diag(h), [1.0, 2.0, 2.0, 1.0])
    np.testing.assert_allclose(np.diag(h, 1), [-1.0, -1.0, -1.0])
    np.testing.assert_allclose(h, h.T)


def test_hamiltonian_harmonic_adds_potential():
    g = build_grid(1, 6, 3.0)
    sp = build_space([(1.0, g)])
    kinetic = hamiltonian(sp, "free", hopping=0.7).matrix
    h = hamiltonian(sp, "harmonic", omega=2.0, hopping=0.7).matrix
    expected = 0.5 * 4.0 * g.positions[:, 0] ** 2
    np.testing.assert_allclose(np.diag(h - kinetic).real, expected, rtol=1e-12)


def test_hamiltonian_double_well_shape():
    g = build_grid(1, 8, 4.0)
    sp = build_space([(1.0, g)])
    h = hamiltonian(sp, "double_well", barrier=3.0, separation=4.0, hopping=0.0).matrix
    v = np.diag(h).real
    x = g.positions[:, 0]
    wells = np.sort(np.argsort(v)[:2])
    # minima at the lattice sites closest to +-separation/2, symmetric about 0
    assert x[wells[0]] == -x[wells[1]]
    assert abs(abs(x[wells[0]]) - 2.0) <= g.spacing / 2
    assert v[np.abs(x).argmin()] > v[wells[0]]      # barrier between the wells


def test_hamiltonian_two_particle_embedding():
    g = build_grid(1, 3, 1.5)
    sp = build_space([(1.0, g), (1.0, g)])
    h = hamiltonian(sp, "free", hopping=1.0).matrix
    single = hamiltonian(build_space([(1.0, g)]), "free", hopping=1.0).matrix
    expected = np.kron(single, np.eye(3)) + np.kron(np.eye(3), single)
    np.testing.assert_allclose(h, expected)


def test_hamiltonian_unknown_kind(small_system):
    with pytest.raises(ValidationError, match="unknown Hamiltonian kind"):
        hamiltonian(small_system["space"], "anharmonic")
    with pytest.raises(ValidationError):
        hamiltonian(small_system["space"], "harmonic")  # missing omega


# ---------------------------------------------------------------------------
# Lindblad generator
# ---------------------------------------------------------------------------

def _random_matrix(rng, d, hermitian=False):
    m = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return 0.5 * (m + m.conj().T) if hermitian else m


def test_generator_unital(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    h = hamiltonian(small_system["space"], "free", hopping=1.0).matrix
    out = lindblad_generator(np.eye(8), "heisenberg", h, cs, c)
    assert np.abs(out).max() < 1e-12


def test_generator_trace_preserving_and_hermiticity(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    h = hamiltonian(small_system["space"], "free", hopping=1.0).matrix
    rng = np.random.default_rng(1)
    for _ in range(5):
        rho = _random_matrix(rng, 8, hermitian=True)
        out = lindblad_generator(rho, "schrodinger", h, cs, c)
        assert abs(np.trace(out)) <= 1e-12 * np.abs(rho).max()
        assert np.abs(out - out.conj().T).max() <= 1e-12 * np.abs(out).max()


def test_generator_conserves_diagonal_observables(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    diag = np.diag(np.arange(8.0))
    out = lindblad_generator(diag, "heisenberg", None, cs, c)
    assert np.abs(out).max() < 1e-12


def test_generator_picture_duality(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    h = hamiltonian(small_system["space"], "free", hopping=1.0).matrix
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = _random_matrix(rng, 8)
        rho = _random_matrix(rng, 8, hermitian=True)
        lhs = np.trace(a @ lindblad_generator(rho, "schrodinger", h, cs, c))
        rhs = np.trace(lindblad_generator(a, "heisenberg", h, cs, c) @ rho)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_generator_matches_spatial_double_sum():
    # oracle: contract the kernel against the site observables pair by pair
    sys6 = make_system(n_sites=6, G=3.0)
    cs, fam, kern = sys6["collapse"], sys6["family"], sys6["kernel"]
    c, grid = sys6["constants"], sys6["grid"]
    rng = np.random.default_rng(3)
    a = _random_matrix(rng, 6, hermitian=True)
    w = grid.cell_weight
    oracle = np.zeros((6, 6), dtype=complex)
    for j in range(6):
        mu_j = np.diag(fam.profiles[j]).astype(complex)
        for k in range(6):
            mu_k = np.diag(fam.profiles[k]).astype(complex)
            oracle += (w * w * kern.matrix[j, k] / (2.0 * c.hbar)) * (
                (mu_j @ a - a @ mu_j) @ mu_k + mu_j @ (a @ mu_k - mu_k @ a))
    out = lindblad_generator(a, "heisenberg", None, cs, c)
    scale = max(np.abs(oracle).max(), 1.0)
    assert np.abs(out - oracle).max() <= 1e-10 * scale


def test_generator_dimension_mismatch(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    with pytest.raises(ValidationError):
        lindblad_generator(np.eye(5), "heisenberg", None, cs, c)
    with pytest.raises(ValidationError):
        lindblad_generator(np.eye(8), "sideways", None, cs, c)


# ---------------------------------------------------------------------------
# dissipation
# ---------------------------------------------------------------------------

def test_dissipation_vanishes_for_diagonal(small_system):
    res = dissipation(np.diag(np.arange(8.0)), small_system["collapse"])
    assert np.abs(res.matrix).max() < 1e-14


def test_dissipation_shift_operator_pattern(small_system):
    # one channel L = diag(0,1,2,3)/sqrt(hbar), A = lowering shift
    cs0 = small_system["collapse"]
    ell = np.array([[0.0, 1.0, 2.0, 3.0]])
    cs = CollapseSet(diagonals=ell, decomposition=cs0.decomposition,
                     family=cs0.family, constants=cs0.constants)
    shift = np.diag(np.ones(3), -1).astype(complex)   # |j+1><j|
    res = dissipation(shift, cs)
    # oracle: [L, shift] has entries (l_{j+1} - l_j) |j+1><j|
    comm = np.diag(ell[0]) @ shift - shift @ np.diag(ell[0])
    oracle = comm.conj().T @ comm
    np.testing.assert_allclose(res.matrix, oracle, atol=1e-14)
    np.testing.assert_allclose(np.diag(res.matrix).real, [1.0, 1.0, 1.0, 0.0])


def test_dissipation_psd_random_operators(small_system):
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = _random_matrix(rng, 8)
        res = dissipation(a, small_system["collapse"])
        assert res.min_eigenvalue >= -1e-10
        # oracle: eigensolve of the assembled matrix agrees with the certificate
        assert res.min_eigenvalue == pytest.approx(
            float(np.linalg.eigvalsh(res.matrix)[0]), abs=1e-12)


def test_dissipation_matches_generator_route(small_system):
    cs, c = small_system["collapse"], small_system["constants"]
    rng = np.random.default_rng(5)
    a = _random_matrix(rng, 8)
    gen = lambda m: lindblad_generator(m, "heisenberg", None, cs, c)
    oracle = gen(a.conj().T @ a) - gen(a.conj().T) @ a - a.conj().T @ gen(a)
    res = dissipation(a, cs)
    assert np.abs(res.matrix - oracle).max() <= 1e-10 * np.abs(oracle).max()


# ---------------------------------------------------------------------------
# Itô correction identity
# ---------------------------------------------------------------------------

def test_ito_identity_zero_mass():
    consts = PhysicalConstants(G=4.0)
    g = build_grid(1, 6, 3.0)
    k = build_kernel(g, "newtonian_mollified", consts, sigma=1.0)
    d = spectral_decompose(k)
    sp = build_space([ParticleSpec(0.0, g)])
    fam = mass_density_family(sp, g, 1.0)
    cs = collapse_set(fam, d, consts)
    rep = ito_correction_check(cs, fam, k, consts)
    assert rep.max_deviation == 0.0
    assert np.abs(rep.channel_route).max() == 0.0


def test_ito_identity_single_particle(small_system):
    rep = ito_correction_check(small_system["collapse"], small_system["family"],
                               small_system["kernel"], small_system["constants"])
    assert rep.max_deviation <= 1e-10 * rep.scale


def test_ito_identity_two_particles_and_overlap_enhancement():
    sys2 = make_system(n_sites=6, masses=(1.0, 2.0))
    cs, fam, kern, consts = (sys2["collapse"], sys2["family"], sys2["kernel"],
                             sys2["constants"])
    rep = ito_correction_check(cs, fam, kern, consts)
    assert rep.max_deviation <= 1e-10 * rep.scale
    sp = sys2["space"]
    coincident = sp.basis_index((3, 3))
    separated = sp.basis_index((1, 4))
    assert rep.channel_route[coincident] > rep.channel_route[separated]
    # oracle: the self-energy quadratic form evaluated on both configurations
    g_c = self_energy(fam.mass_vector(coincident), kern) / consts.hbar
    g_s = self_energy(fam.mass_vector(separated), kern) / consts.hbar
    assert g_c > g_s
    assert rep.channel_route[coincident] == pytest.approx(g_c, rel=1e-10)


def test_ito_identity_provenance_guard(small_system):
    other = make_system(n_sites=8, G=2.0)
    with pytest.raises(ValidationError, match="provenance"):
        ito_correction_check(small_system["collapse"], other["family"],
                             small_system["kernel"], small_system["constants"])
