"""Gravitational decoherence as a quantum filtering problem, at desk scale.

Build a mollified Newtonian decoherence kernel on a lattice, diagonalize it
into collapse channels, and integrate the master equation, the diffusive
homodyne filter, and the number-counting jump filter — with every identity
the construction rests on exposed as a checkable computation.
"""

__version__ = "0.1.0"

from .diagnostics import (
    BornReport,
    DecayFit,
    EnsembleSummary,
    WhitenessReport,
    WhitenessThresholds,
    coherence_decay_rate,
    collapse_statistics,
    ensemble_mean,
    innovation_whiteness,
    trace_distance,
)
from .dynamics import (
    IntegrationConfig,
    MeasurementRecord,
    QuantumState,
    Trajectory,
    basis_state,
    filter_counting,
    filter_homodyne,
    fresh_noise,
    generate_measurement_record,
    homodyne_trajectory,
    master_evolve,
    maximally_mixed,
    replay,
    superposition,
)
from .ensemble import EnsembleResult, run_ensemble
from .errors import (
    DPFilterError,
    NumericalError,
    ReplayError,
    SizingError,
    StepSizeError,
    ValidationError,
)
from .kernel import (
    Kernel,
    NoiseIncrement,
    PhysicalConstants,
    QuadSpec,
    SpatialGrid,
    SpectralDecomposition,
    build_grid,
    build_kernel,
    decomposition_from_json,
    gamma_square_root_check,
    kernel_from_json,
    rkhs_pairing_check,
    sample_noise_field,
    self_energy,
    spectral_decompose,
)
from .quantum_ops import (
    CollapseSet,
    HilbertSpace,
    MassDensityFamily,
    Operator,
    ParticleSpec,
    build_space,
    collapse_set,
    dissipation,
    hamiltonian,
    ito_correction_check,
    lindblad_generator,
    mass_density_family,
)

__all__ = [name for name in dir() if not name.startswith("_")]
