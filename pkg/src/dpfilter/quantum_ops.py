"""Hilbert spaces, mass-density observables, collapse operators, Lindblad algebra.

The mass-density observables are diagonal in the (product) position basis, so
every collapse channel operator is a real diagonal matrix and the dissipative
part of the generator acts elementwise.  ``lindblad_generator`` and
``dissipation`` nevertheless implement the operator-level definitions
literally so they can be cross-checked against the contracted spatial
double-sum form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizingError, ValidationError
from .kernel import Kernel, PhysicalConstants, SpatialGrid, SpectralDecomposition, self_energy

DEFAULT_DIMENSION_CAP = 1024
HERMITICITY_RTOL = 1e-12
HAMILTONIAN_KINDS = ("zero", "free", "harmonic", "double_well")


# ---------------------------------------------------------------------------
# spaces and operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleSpec:
    mass: float
    grid: SpatialGrid

    def __post_init__(self):
        if not (self.mass >= 0.0):
            raise ValidationError(f"particle mass must be >= 0, got {self.mass}")


@dataclass(frozen=True, eq=False)
class HilbertSpace:
    """Product position basis for a finite set of lattice particles."""

    particles: tuple[ParticleSpec, ...]
    dimension: int
    shape: tuple[int, ...]
    site_indices: np.ndarray   # (dimension, n_particles): basis index -> site per particle

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    def basis_label(self, index: int) -> tuple[int, ...]:
        return tuple(int(s) for s in self.site_indices[index])

    def basis_index(self, sites) -> int:
        return int(np.ravel_multi_index(tuple(int(s) for s in sites), self.shape))

    def particle_positions(self, i: int) -> np.ndarray:
        """(dimension, dim) position of particle i in every basis state."""
        return self.particles[i].grid.positions[self.site_indices[:, i]]


def build_space(particle_specs, cap: int = DEFAULT_DIMENSION_CAP) -> HilbertSpace:
    specs = tuple(
        p if isinstance(p, ParticleSpec) else ParticleSpec(*p) for p in particle_specs
    )
    if not specs:
        raise ValidationError("at least one particle is required")
    shape = tuple(p.grid.n_sites for p in specs)
    dim = int(np.prod(shape))
    if dim > cap:
        raise SizingError(
            f"product dimension {dim} exceeds the Hilbert-space cap of {cap}")
    site_indices = np.stack(np.unravel_index(np.arange(dim), shape), axis=1)
    site_indices.setflags(write=False)
    return HilbertSpace(particles=specs, dimension=dim, shape=shape,
                        site_indices=site_indices)


@dataclass(frozen=True, eq=False)
class Operator:
    """Dense operator with optional diagonal/Hermitian structure flags."""

    matrix: np.ndarray
    diagonal: bool = False
    hermitian: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"operator matrix must be square, got {m.shape}")
        scale = np.abs(m).max() or 1.0
        if self.diagonal and np.abs(m - np.diag(np.diagonal(m))).max() > 0.0:
            raise ValidationError("operator flagged diagonal has off-diagonal entries")
        if self.hermitian and np.abs(m - m.conj().T).max() > HERMITICITY_RTOL * scale:
            raise ValidationError("operator flagged Hermitian fails the 1e-12 check")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def to_json(self) -> dict:
        flat = self.matrix.reshape(-1)
        return {
            "dimension": self.dim,
            "entries": np.stack([flat.real, flat.imag], axis=1),
            "diagonal": self.diagonal,
            "hermitian": self.hermitian,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Operator":
        d = int(obj["dimension"])
        entries = np.asarray(obj["entries"], dtype=float)
        m = (entries[:, 0] + 1j * entries[:, 1]).reshape(d, d)
        return cls(m, diagonal=bool(obj.get("diagonal", False)),
                   hermitian=bool(obj.get("hermitian", False)))


def as_matrix(op, dim: int | None = None) -> np.ndarray:
    m = op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if dim is not None and m.shape[0] != dim:
        raise ValidationError(f"operator dimension {m.shape[0]} != expected {dim}")
    return m


# ---------------------------------------------------------------------------
# mass-density observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MassDensityFamily:
    """Diagonal mass-density observables μ̂_j, one per grid site.

    ``profiles[j, b]`` is the diagonal entry of μ̂_j on basis state b. The
    lattice sum w·Σ_j μ̂_j equals total-mass times identity up to the reported
    mollifier leakage bound (boundary sites lose Gaussian mass off the box).
    """

    space: HilbertSpace
    grid: SpatialGrid
    sigma: float
    profiles: np.ndarray        # (n_sites, dimension), real >= 0
    leakage_bound: float        # worst single-site quadrature deficit of the mollifier
    total_mass: float

    @property
    def normalization_tolerance(self) -> float:
        return self.total_mass * self.leakage_bound

    def operator(self, site: int) -> Operator:
        return Operator(np.diag(self.profiles[site].astype(complex)),
                        diagonal=True, hermitian=True)

    def mass_vector(self, basis_index: int) -> np.ndarray:
        """Classical mass distribution of one basis configuration."""
        return self.profiles[:, basis_index]


def _gaussian_mollifier(dist_sq: np.ndarray, sigma: float, dim: int) -> np.ndarray:
    norm = (2.0 * np.pi * sigma**2) ** (dim / 2.0)
    return np.exp(-dist_sq / (2.0 * sigma**2)) / norm


def mass_density_family(space: HilbertSpace, grid: SpatialGrid,
                        mollifier_sigma: float) -> MassDensityFamily:
    """Smear each particle's point mass over the lattice with a Gaussian of
    width ``mollifier_sigma`` (must resolve the lattice: sigma >= spacing/2)."""
    if not (mollifier_sigma > 0.0):
        raise ValidationError("mollifier sigma must be > 0")
    if mollifier_sigma < grid.spacing / 2.0:
        raise ValidationError(
            f"mollifier sigma {mollifier_sigma} is below half the lattice spacing "
            f"{grid.spacing / 2.0}; point masses would fall between sites")
    for i, p in enumerate(space.particles):
        if not p.grid.same_lattice(grid):
            raise ValidationError(f"particle {i} lives on a different lattice than the field grid")

    profiles = np.zeros((grid.n_sites, space.dimension))
    for i, p in enumerate(space.particles):
        pos = space.particle_positions(i)             # (D, dim)
        diff = grid.positions[:, None, :] - pos[None, :, :]
        profiles += p.mass * _gaussian_mollifier((diff**2).sum(-1), mollifier_sigma, grid.dim)

    # worst-case deficit of w·Σ_j φ over candidate point positions (the sites)
    diff = grid.positions[:, None, :] - grid.positions[None, :, :]
    unit = _gaussian_mollifier((diff**2).sum(-1), mollifier_sigma, grid.dim)
    leakage = float(np.abs(1.0 - grid.cell_weight * unit.sum(axis=0)).max())

    profiles.setflags(write=False)
    return MassDensityFamily(
        space=space, grid=grid, sigma=float(mollifier_sigma), profiles=profiles,
        leakage_bound=leakage,
        total_mass=float(sum(p.mass for p in space.particles)),
    )


# ---------------------------------------------------------------------------
# collapse channels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CollapseSet:
    """Hermitian diagonal channel operators L_a = √(λ_a/ħ) Σ_j √w e_j(a) μ̂_j."""

    diagonals: np.ndarray      # (rank, dimension) real
    decomposition: SpectralDecomposition
    family: MassDensityFamily
    constants: PhysicalConstants

    @property
    def rank(self) -> int:
        return self.diagonals.shape[0]

    @property
    def dimension(self) -> int:
        return self.diagonals.shape[1]

    def operator(self, channel: int) -> Operator:
        return Operator(np.diag(self.diagonals[channel].astype(complex)),
                        diagonal=True, hermitian=True)

    def total_rate_diagonal(self) -> np.ndarray:
        """Diagonal of Σ_a L_a†L_a (the total decoherence rate per basis state)."""
        return (self.diagonals**2).sum(axis=0)

    def channel_overlap(self) -> np.ndarray:
        """K[b,c] = Σ_a ℓ_a(b) ℓ_a(c); the sandwich Σ_a L_a ρ L_a is K ∘ ρ."""
        return self.diagonals.T @ self.diagonals

    def dephasing_rates(self) -> np.ndarray:
        """Λ[b,c] = ½ Σ_a (ℓ_a(b) - ℓ_a(c))²: position-basis coherence decay rates."""
        s2 = self.total_rate_diagonal()
        return 0.5 * (s2[:, None] + s2[None, :]) - self.channel_overlap()


def configuration_self_energies(family: MassDensityFamily, kernel: Kernel) -> np.ndarray:
    """Γ(μ_b) for every basis configuration b, from the kernel quadratic form."""
    w = kernel.grid.cell_weight
    return w * w * np.einsum("jb,jk,kb->b", family.profiles, kernel.matrix,
                             family.profiles, optimize=True)


def collapse_set(family: MassDensityFamily, decomp: SpectralDecomposition,
                 constants: PhysicalConstants, contraction_tol: float = 1e-10) -> CollapseSet:
    """Build the channel operators and verify the kernel-contraction identity.

    On three deterministic random diagonal test operators X the channel sum
    Σ_a L_a X L_a must reproduce (1/ħ) Σ_jk w_j w_k g_jk μ̂_j X μ̂_k.
    """
    if not decomp.kernel.grid.same_lattice(family.grid):
        raise ValidationError("decomposition and mass-density family use different grids")
    if decomp.rank == 0:
        raise ValidationError("kernel decomposition has rank 0: no decoherence channels")
    w = family.grid.cell_weight
    scale = np.sqrt(decomp.eigenvalues / constants.hbar)[:, None] * np.sqrt(w)
    diagonals = scale * (decomp.modes @ family.profiles)

    # channel route vs spatial double-sum route, on random diagonal operators
    s2 = (diagonals**2).sum(axis=0)
    gammas = configuration_self_energies(family, decomp.kernel) / constants.hbar
    check_scale = max(float(np.abs(gammas).max()), 1e-300)
    gen = np.random.Generator(np.random.Philox(key=np.array([0x9E3779B9, 0], dtype=np.uint64)))
    for _ in range(3):
        x = gen.standard_normal(family.space.dimension)
        dev = np.abs((s2 - gammas) * x).max() / (check_scale * max(float(np.abs(x).max()), 1.0))
        if dev > contraction_tol:
            raise ValidationError(
                f"collapse channels fail the kernel-contraction identity: "
                f"deviation {dev:.3e} > {contraction_tol:g} (truncation too aggressive?)")

    diagonals.setflags(write=False)
    return CollapseSet(diagonals=diagonals, decomposition=decomp,
                       family=family, constants=constants)


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------

def _lattice_laplacian(grid: SpatialGrid) -> np.ndarray:
    """Graph Laplacian (degree - adjacency) of the open-boundary lattice."""
    diff = np.abs(grid.positions[:, None, :] - grid.positions[None, :, :])
    # axis-aligned nearest neighbors: exactly one coordinate differs, by the spacing
    step = np.isclose(diff, grid.spacing)
    flat = np.isclose(diff, 0.0)
    adj = ((step.sum(-1) == 1) & (step | flat).all(-1)).astype(float)
    return np.diag(adj.sum(axis=1)) - adj


def _embed(space: HilbertSpace, particle: int, single: np.ndarray) -> np.ndarray:
    ops = [np.eye(n) for n in space.shape]
    ops[particle] = single
    out = ops[0]
    for o in ops[1:]:
        out = np.kron(out, o)
    return out


def hamiltonian(space: HilbertSpace, kind: str, **params) -> Operator:
    """System Hamiltonian menu: zero, free hopping, harmonic, double well.

    ``free`` uses t·(degree - adjacency) per particle (open boundaries).
    ``harmonic``/``double_well`` add an on-site potential to the same kinetic
    stencil, whose hopping defaults to 1/(2 m Δx²) per particle.
    """
    D = space.dimension
    if kind == "zero":
        if params:
            raise ValidationError("zero Hamiltonian takes no parameters")
        return Operator(np.zeros((D, D), dtype=complex), diagonal=True, hermitian=True)
    if kind not in HAMILTONIAN_KINDS:
        raise ValidationError(f"unknown Hamiltonian kind {kind!r}; choose from {HAMILTONIAN_KINDS}")

    total = np.zeros((D, D))
    for i, p in enumerate(space.particles):
        if kind == "free":
            hop = float(params.get("hopping", 1.0))
            single = hop * _lattice_laplacian(p.grid)
            potential = None
        else:
            hop = params.get("hopping")
            if hop is None and p.mass == 0.0:
                raise ValidationError(
                    "default hopping 1/(2 m dx^2) is undefined for a massless "
                    "particle; pass hopping explicitly")
            hop = float(hop) if hop is not None else 1.0 / (2.0 * p.mass * p.grid.spacing**2)
            single = hop * _lattice_laplacian(p.grid)
            x = p.grid.positions
            if kind == "harmonic":
                omega = params.get("omega")
                if omega is None or not (omega > 0):
                    raise ValidationError("harmonic requires omega > 0")
                potential = 0.5 * omega**2 * (x**2).sum(axis=1)
            else:  # double_well
                barrier = params.get("barrier")
                separation = params.get("separation")
                if barrier is None or not (barrier > 0):
                    raise ValidationError("double_well requires barrier > 0")
                if separation is None or not (separation > 0):
                    raise ValidationError("double_well requires separation > 0")
                half = separation / 2.0
                potential = barrier * ((x[:, 0] / half) ** 2 - 1.0) ** 2
        if potential is not None:
            single = single + np.diag(potential)
        total += _embed(space, i, single)
    return Operator(total.astype(complex), hermitian=True)


# ---------------------------------------------------------------------------
# Lindblad generator, dissipation, Itô-correction identity
# ---------------------------------------------------------------------------

def lindblad_generator(A, direction: str, H, collapse: CollapseSet,
                       constants: PhysicalConstants) -> np.ndarray:
    """Apply the decoherence generator to A.

    heisenberg:   ℒ(A)  = (1/iħ)[A, H] + ½ Σ_a ([L_a, A] L_a + L_a [A, L_a])
    schrodinger:  ℒ*(ρ) = (1/iħ)[H, ρ] + Σ_a (L_a ρ L_a - ½{L_a², ρ})

    For Hermitian channels the dissipative part is the same superoperator in
    both pictures; only the Hamiltonian term changes sign under the trace dual.
    """
    if direction not in ("heisenberg", "schrodinger"):
        raise ValidationError(f"direction must be 'heisenberg' or 'schrodinger', got {direction!r}")
    D = collapse.dimension
    a = as_matrix(A, D)
    out = np.zeros_like(a)
    if H is not None:
        h = as_matrix(H, D)
        comm = a @ h - h @ a
        out = out + (comm if direction == "heisenberg" else -comm) / (1j * constants.hbar)
    for ell in collapse.diagonals:
        la = ell[:, None] * a            # L A
        al = a * ell[None, :]            # A L
        out = out + (la * ell[None, :]) - 0.5 * (ell[:, None] * la) - 0.5 * (al * ell[None, :])
    return out


@dataclass(frozen=True, eq=False)
class DissipationResult:
    matrix: np.ndarray
    min_eigenvalue: float


def dissipation(A, collapse: CollapseSet) -> DissipationResult:
    """𝒟(A) = Σ_a [L_a, A]† [L_a, A], with its smallest eigenvalue as a
    positivity certificate.  Equals ℒ(A†A) - ℒ(A†)A - A†ℒ(A) for H = 0."""
    a = as_matrix(A, collapse.dimension)
    out = np.zeros_like(a)
    for ell in collapse.diagonals:
        comm = ell[:, None] * a - a * ell[None, :]
        out = out + comm.conj().T @ comm
    out = 0.5 * (out + out.conj().T)
    return DissipationResult(matrix=out, min_eigenvalue=float(np.linalg.eigvalsh(out)[0]))


@dataclass(frozen=True, eq=False)
class ItoCorrectionReport:
    """Per-basis-state comparison of Σ_a ⟨b|L_a†L_a|b⟩ with Γ(μ_b)/ħ."""

    channel_route: np.ndarray
    self_energy_route: np.ndarray
    max_deviation: float
    scale: float

    @property
    def relative_deviation(self) -> float:
        return self.max_deviation / self.scale if self.scale > 0 else self.max_deviation


def ito_correction_check(collapse: CollapseSet, family: MassDensityFamily,
                         kernel: Kernel, constants: PhysicalConstants) -> ItoCorrectionReport:
    if collapse.family is not family or collapse.decomposition.kernel is not kernel:
        raise ValidationError("collapse set, family and kernel have inconsistent provenance")
    lhs = collapse.total_rate_diagonal()
    rhs = configuration_self_energies(family, kernel) / constants.hbar
    scale = float(max(np.abs(lhs).max(), np.abs(rhs).max(), 0.0))
    return ItoCorrectionReport(
        channel_route=lhs, self_energy_route=rhs,
        max_deviation=float(np.abs(lhs - rhs).max()), scale=scale)
