"""Time evolution engines.

Four integrators share the diagonal-channel structure of the collapse set:

* ``master_evolve``       - deterministic RK4 on dρ/dt = ℒ*(ρ)
* ``homodyne_trajectory`` - Euler-Maruyama on the nonlinear pure-state SDE,
  emitting the measurement record dY_a = 2⟨L_a⟩dt + dW_a
* ``filter_homodyne``     - conditioned-density equation driven either by
  fresh innovations or by a replayed record (dI_a = dY_a - 2 tr(L_a ρ) dt)
* ``filter_counting``     - number-counting unraveling: exact nonlinear
  no-jump drift plus Bernoulli-thinned jumps ρ -> L_a ρ L_a / tr(·) at
  intensity tr(L_a†L_a ρ); innovations are compensated-Poisson increments

Every step ends with exact renormalization (and a Hermitian projection for
densities); the pre-renormalization drift is logged.  All integrators evolve
a whole batch of trajectories at once; the public single-trajectory functions
are batch-size-1 wrappers, and ensemble member i consumes exactly the noise
stream keyed by (seed, i) regardless of chunking or threading.

Counting convention: the measured intensity is the normally-ordered
tr(L†L ρ), matching the filter equation (the operator-ordering of the raw
number observable is a convention this module does not rely on).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ReplayError, StepSizeError, ValidationError
from .quantum_ops import CollapseSet, as_matrix
from .rng import trajectory_stream, validate_seed
from .serialize import fmt

SCHEMES = ("euler_maruyama_renorm", "master_rk4")
STABILITY_WARN_LEVEL = 0.1
NOISE_BLOCK_STEPS = 1024
JUMP_INTENSITY_FLOOR = 1e-14


# ---------------------------------------------------------------------------
# configuration and state containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationConfig:
    dt: float
    n_steps: int
    scheme: str = "euler_maruyama_renorm"
    seed: int = 0
    trajectory_index: int = 0
    record_stride: int = 1

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.record_stride < 1 or self.n_steps % self.record_stride != 0:
            raise ValidationError("record_stride must be >= 1 and divide n_steps")
        validate_seed(self.seed)
        if self.trajectory_index < 0:
            raise ValidationError("trajectory_index must be >= 0")

    @property
    def n_recorded(self) -> int:
        return self.n_steps // self.record_stride + 1

    def recorded_times(self) -> np.ndarray:
        return np.arange(self.n_recorded) * (self.dt * self.record_stride)


@dataclass(frozen=True, eq=False)
class QuantumState:
    kind: str                # "pure" | "mixed"
    data: np.ndarray

    @classmethod
    def pure(cls, vector) -> "QuantumState":
        v = np.asarray(vector, dtype=complex)
        if v.ndim != 1:
            raise ValidationError("pure state must be a vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-10:
            raise ValidationError("pure state is not normalized within 1e-10")
        return cls("pure", v)

    @classmethod
    def mixed(cls, matrix) -> "QuantumState":
        m = np.asarray(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("mixed state must be a square matrix")
        scale = max(np.abs(m).max(), 1.0)
        if np.abs(m - m.conj().T).max() > 1e-10 * scale:
            raise ValidationError("density matrix is not Hermitian within 1e-10")
        if abs(np.trace(m).real - 1.0) > 1e-10:
            raise ValidationError("density matrix trace differs from 1 by more than 1e-10")
        return cls("mixed", m)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def to_density(self) -> np.ndarray:
        if self.kind == "pure":
            return np.outer(self.data, self.data.conj())
        return self.data

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.to_density())[0])


def basis_state(dimension: int, index: int) -> np.ndarray:
    v = np.zeros(dimension, dtype=complex)
    v[index] = 1.0
    return v


def superposition(dimension: int, terms) -> np.ndarray:
    """Normalized superposition from (basis_index, amplitude) pairs."""
    v = np.zeros(dimension, dtype=complex)
    for index, amp in terms:
        v[index] += complex(amp)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValidationError("superposition has zero norm")
    return v / norm


def maximally_mixed(dimension: int) -> np.ndarray:
    return np.eye(dimension, dtype=complex) / dimension


# ---------------------------------------------------------------------------
# measurement records
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Per-step, per-channel measurement increments.

    homodyne: ``increments`` holds dY_a, ``expected_signal`` the emitter's
    2⟨L_a⟩ (so innovations = dY - s·dt).  counting: ``increments`` holds
    dN_a ∈ {0,1} and ``expected_signal`` the intensities tr(L_a†L_a ρ)
    (innovations = dN - ν·dt).  Records loaded from disk carry only the
    increments; innovations then require the consuming filter's signal.
    """

    kind: str                              # "homodyne" | "counting"
    dt: float
    increments: np.ndarray                 # (n_steps, R)
    expected_signal: np.ndarray | None     # (n_steps, R)

    def __post_init__(self):
        if self.kind not in ("homodyne", "counting"):
            raise ValidationError(f"record kind must be homodyne or counting, got {self.kind!r}")

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_channels(self) -> int:
        return self.increments.shape[1]

    @property
    def innovations(self) -> np.ndarray:
        if self.expected_signal is None:
            raise ValidationError("record carries no expected signal; innovations undefined")
        return self.increments - self.expected_signal * self.dt

    def jsonl_lines(self):
        key = "dY" if self.kind == "homodyne" else None
        for i in range(self.n_steps):
            t = fmt(i * self.dt)
            if key:
                vals = ",".join(fmt(v) for v in self.increments[i])
                yield f'{{"t":{t},"dY":[{vals}]}}'
            else:
                hits = ",".join(str(int(a)) for a in np.nonzero(self.increments[i])[0])
                yield f'{{"t":{t},"jumps":[{hits}]}}'

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.jsonl_lines():
                fh.write(line + "\n")

    @classmethod
    def from_jsonl(cls, path, n_channels: int | None = None) -> "MeasurementRecord":
        rows = []
        kind = None
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if "dY" in obj:
                    kind = "homodyne"
                    rows.append((float(obj["t"]), np.asarray(obj["dY"], dtype=float)))
                elif "jumps" in obj:
                    kind = "counting"
                    rows.append((float(obj["t"]), [int(a) for a in obj["jumps"]]))
                else:
                    raise ValidationError(f"unrecognized record line: {line[:80]}")
        if len(rows) < 2:
            raise ValidationError("record needs at least two steps to define dt")
        times = [t for t, _ in rows]
        dt = times[1] - times[0]
        if kind == "homodyne":
            inc = np.stack([v for _, v in rows])
        else:
            if n_channels is None:
                raise ValidationError("loading a counting record requires n_channels")
            inc = np.zeros((len(rows), n_channels))
            for i, (_, hits) in enumerate(rows):
                inc[i, hits] = 1.0
        return cls(kind=kind, dt=dt, increments=inc, expected_signal=None)


@dataclass(frozen=True)
class FreshNoise:
    """Generate the record on the fly; innovations are the raw Wiener noise."""
    seed: int | None = None


@dataclass(frozen=True)
class Replay:
    """Drive the filter with a previously emitted record."""
    record: MeasurementRecord


def fresh_noise(seed: int | None = None) -> FreshNoise:
    return FreshNoise(seed)


def replay(record: MeasurementRecord) -> Replay:
    return Replay(record)


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    kind: str                   # "pure" | "mixed"
    states: np.ndarray          # (T, D) or (T, D, D)
    record: MeasurementRecord | None
    observables: dict[str, np.ndarray]
    config: IntegrationConfig
    log: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _check_stability(collapse: CollapseSet, dt: float) -> float:
    rate = float(collapse.total_rate_diagonal().max()) * dt
    if rate > STABILITY_WARN_LEVEL:
        warnings.warn(
            f"dt * max total decoherence rate = {rate:.3g} exceeds "
            f"{STABILITY_WARN_LEVEL}; the Euler step may be inaccurate",
            RuntimeWarning, stacklevel=3)
    return rate


def _as_pure_batch(psi0, dim: int, batch: int) -> np.ndarray:
    v = psi0.data if isinstance(psi0, QuantumState) else np.asarray(psi0, dtype=complex)
    if isinstance(psi0, QuantumState) and psi0.kind != "pure":
        raise ValidationError("a pure state is required")
    if v.shape != (dim,):
        raise ValidationError(f"state has shape {v.shape}, expected ({dim},)")
    if abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise ValidationError("initial state is not normalized within 1e-10")
    return np.tile(v.astype(complex), (batch, 1))

def _as_density_batch(rho0, dim: int, batch: int) -> np.ndarray:
    if isinstance(rho0, QuantumState):
        m = rho0.to_density()
    else:
        arr = np.asarray(rho0, dtype=complex)
        m = np.outer(arr, arr.conj()) if arr.ndim == 1 else arr
    if m.shape != (dim, dim):
        raise ValidationError(f"density matrix has shape {m.shape}, expected ({dim}, {dim})")
    QuantumState.mixed(m)   # validates hermiticity and trace
    return np.tile(m, (batch, 1, 1))


def _positions_of(collapse: CollapseSet, particle: int = 0) -> np.ndarray:
    return collapse.family.space.particle_positions(particle)


def position_variance(populations: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Var(x) = E|x|² - |E x|² over the basis-position distribution."""
    mean = populations @ positions
    second = populations @ (positions**2).sum(axis=1)
    return second - (mean**2).sum(axis=-1)


def _draw_normals(streams, n: int, channels: int, scale: float) -> np.ndarray:
    return np.stack([g.standard_normal((n, channels)) for g in streams]) * scale


def _draw_uniforms(streams, n: int, channels: int) -> np.ndarray:
    return np.stack([g.random((n, channels)) for g in streams])


class _Collector:
    """Per-recorded-time accumulation for one batch of trajectories."""

    def __init__(self, n_recorded, batch, dim, kind, *, keep_states,
                 accumulate_mean, positions):
        self.keep_states = keep_states
        self.positions = positions
        self.kind = kind
        shape = (n_recorded, batch, dim) if kind == "pure" else (n_recorded, batch, dim, dim)
        self.states = np.zeros(shape, dtype=complex) if keep_states else None
        self.mean = np.zeros((n_recorded, dim, dim), dtype=complex) if accumulate_mean else None
        self.drift = np.zeros((n_recorded, batch))
        self.pos_var = np.zeros((n_recorded, batch)) if positions is not None else None

    def store(self, idx, state, drift):
        if self.keep_states:
            self.states[idx] = state
        if self.mean is not None:
            if self.kind == "pure":
                self.mean[idx] = np.einsum("bi,bj->ij", state, state.conj())
            else:
                self.mean[idx] = state.sum(axis=0)
        self.drift[idx] = drift
        if self.pos_var is not None:
            if self.kind == "pure":
                pops = state.real**2 + state.imag**2
            else:
                pops = np.einsum("bii->bi", state).real
            self.pos_var[idx] = position_variance(pops, self.positions)


# ---------------------------------------------------------------------------
# deterministic master equation (RK4)
# ---------------------------------------------------------------------------

def master_evolve(rho0, H, collapse: CollapseSet, config: IntegrationConfig,
                  positivity_tol: float = 1e-6) -> Trajectory:
    """Classical RK4 on dρ/dt = ℒ*(ρ) with per-step trace renormalization.

    The diagonal-channel dissipator acts elementwise: (ℒ*ρ)_bc picks up
    -Λ_bc ρ_bc on top of the Hamiltonian commutator.
    """
    if config.scheme != "master_rk4":
        raise ValidationError("master_evolve requires scheme 'master_rk4'")
    D = collapse.dimension
    rho = _as_density_batch(rho0, D, 1)[0]
    hbar = collapse.constants.hbar
    Hm = None if H is None else as_matrix(H, D)
    coeff = collapse.channel_overlap() - 0.5 * (
        collapse.total_rate_diagonal()[:, None] + collapse.total_rate_diagonal()[None, :])
    _check_stability(collapse, config.dt)

    def rhs(r):
        out = coeff * r
        if Hm is not None:
            out = out + (Hm @ r - r @ Hm) / (1j * hbar)
        return out

    n_rec = config.n_recorded
    states = np.zeros((n_rec, D, D), dtype=complex)
    drift = np.zeros(n_rec)
    states[0] = rho
    dt = config.dt
    idx = 1
    for s in range(config.n_steps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * dt * k1)
        k3 = rhs(rho + 0.5 * dt * k2)
        k4 = rhs(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tr = np.trace(rho).real
        rho = rho / tr
        if (s + 1) % config.record_stride == 0:
            states[idx] = rho
            drift[idx] = abs(tr - 1.0)
            min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])
            if min_eig < -positivity_tol:
                raise StepSizeError(
                    f"density matrix positivity violated (min eigenvalue {min_eig:.3e} "
                    f"< -{positivity_tol:g}) at t={(s + 1) * dt:.6g}; reduce dt")
            idx += 1
    return Trajectory(times=config.recorded_times(), kind="mixed", states=states,
                      record=None, observables={"trace_drift": drift}, config=config)


# ---------------------------------------------------------------------------
# homodyne pure-state unraveling
# ---------------------------------------------------------------------------

def _homodyne_core(psi: np.ndarray, Hm, collapse: CollapseSet, dt: float,
                   n_steps: int, stride: int, streams, *, keep_states: bool,
                   keep_record: bool, accumulate_mean: bool = False,
                   positions=None):
    ell = collapse.diagonals
    R, D = ell.shape
    B = psi.shape[0]
    s2 = collapse.total_rate_diagonal()
    hbar = collapse.constants.hbar
    ellT = ell.T
    HmT = None if Hm is None else Hm.T.copy()
    sqrt_dt = np.sqrt(dt)

    col = _Collector(n_steps // stride + 1, B, D, "pure", keep_states=keep_states,
                     accumulate_mean=accumulate_mean, positions=positions)
    col.store(0, psi, np.zeros(B))
    dY = np.zeros((B, n_steps, R)) if keep_record else None
    sig = np.zeros((B, n_steps, R)) if keep_record else None

    s = 0
    while s < n_steps:
        nb = min(NOISE_BLOCK_STEPS, n_steps - s)
        dw_block = _draw_normals(streams, nb, R, sqrt_dt)
        for k in range(nb):
            dw = dw_block[:, k, :]
            p = psi.real**2 + psi.imag**2
            m = p @ ellT                                   # ⟨L_a⟩ per trajectory
            if keep_record:
                sig[:, s, :] = 2.0 * m
                dY[:, s, :] = 2.0 * m * dt + dw
            a2 = s2[None, :] - 2.0 * (m @ ell) + (m * m).sum(1)[:, None]
            noise = dw @ ell - (dw * m).sum(1)[:, None]
            delta = (-0.5 * dt) * a2 * psi + noise * psi
            if HmT is not None:
                delta += (-1j * dt / hbar) * (psi @ HmT)
            psi = psi + delta
            norms = np.sqrt((psi.real**2 + psi.imag**2).sum(1))
            if norms.min() < 1e-12:
                raise StepSizeError(
                    f"state norm collapsed below 1e-12 at step {s}; reduce dt")
            psi = psi / norms[:, None]
            s += 1
            if s % stride == 0:
                col.store(s // stride, psi, np.abs(norms - 1.0))
    return psi, col, dY, sig


def homodyne_trajectory(psi0, H, collapse: CollapseSet,
                        config: IntegrationConfig) -> Trajectory:
    """One diffusive pure-state trajectory, with its measurement record.

    Step: ψ += [-(i/ħ)H ψ - ½Σ_a(L_a-⟨L_a⟩)²ψ] dt + Σ_a (L_a-⟨L_a⟩)ψ dW_a,
    then exact renormalization; the emitted record is dY_a = 2⟨L_a⟩dt + dW_a.
    """
    if config.scheme != "euler_maruyama_renorm":
        raise ValidationError("homodyne_trajectory requires scheme 'euler_maruyama_renorm'")
    D = collapse.dimension
    psi = _as_pure_batch(psi0, D, 1)
    Hm = None if H is None else as_matrix(H, D)
    _check_stability(collapse, config.dt)
    streams = [trajectory_stream(config.seed, config.trajectory_index)]
    _, col, dY, sig = _homodyne_core(
        psi, Hm, collapse, config.dt, config.n_steps, config.record_stride,
        streams, keep_states=True, keep_record=True,
        positions=_positions_of(collapse))
    record = MeasurementRecord(kind="homodyne", dt=config.dt,
                               increments=dY[0], expected_signal=sig[0])
    return Trajectory(times=config.recorded_times(), kind="pure",
                      states=col.states[:, 0, :], record=record,
                      observables={"norm_drift": col.drift[:, 0],
                                   "pos_var": col.pos_var[:, 0]},
                      config=config)


# ---------------------------------------------------------------------------
# homodyne density filter
# ---------------------------------------------------------------------------

def _filter_homodyne_core(rho: np.ndarray, Hm, collapse: CollapseSet, dt: float,
                          n_steps: int, stride: int, *, streams=None,
                          replay_dY=None, keep_states: bool, keep_record: bool,
                          accumulate_mean: bool = False, positions=None,
                          positivity_tol: float = 1e-4):
    ell = collapse.diagonals
    R, D = ell.shape
    B = rho.shape[0]
    s2 = collapse.total_rate_diagonal()
    coeff = collapse.channel_overlap() - 0.5 * (s2[:, None] + s2[None, :])
    hbar = collapse.constants.hbar
    ellT = ell.T
    sqrt_dt = np.sqrt(dt)
    fresh = replay_dY is None

    col = _Collector(n_steps // stride + 1, B, D, "mixed", keep_states=keep_states,
                     accumulate_mean=accumulate_mean, positions=positions)
    col.store(0, rho, np.zeros(B))
    dY_out = np.zeros((B, n_steps, R)) if keep_record else None
    sig_out = np.zeros((B, n_steps, R)) if keep_record else None

    s = 0
    while s < n_steps:
        nb = min(NOISE_BLOCK_STEPS, n_steps - s)
        dw_block = _draw_normals(streams, nb, R, sqrt_dt) if fresh else None
        for k in range(nb):
            diag = np.einsum("bii->bi", rho).real
            m = diag @ ellT                                # tr(L_a ρ)
            if fresh:
                dI = dw_block[:, k, :]
                dY = 2.0 * m * dt + dI
            else:
                dY = replay_dY[:, s, :]
                dI = dY - 2.0 * m * dt
            if keep_record:
                dY_out[:, s, :] = dY
                sig_out[:, s, :] = 2.0 * m
            lind = coeff * rho
            if Hm is not None:
                lind = lind + (np.matmul(Hm, rho) - np.matmul(rho, Hm)) / (1j * hbar)
            u = dI @ ell
            rho = (rho + dt * lind
                   + u[:, :, None] * rho + rho * u[:, None, :]
                   - 2.0 * (dI * m).sum(1)[:, None, None] * rho)
            rho = 0.5 * (rho + rho.conj().transpose(0, 2, 1))
            tr = np.einsum("bii->b", rho).real
            if tr.min() < 0.25:
                raise StepSizeError(f"filter trace collapsed at step {s}; reduce dt")
            rho = rho / tr[:, None, None]
            s += 1
            if s % stride == 0:
                idx = s // stride
                col.store(idx, rho, np.abs(tr - 1.0))
                min_eig = np.linalg.eigvalsh(rho).min()
                if min_eig < -positivity_tol:
                    raise StepSizeError(
                        f"filter positivity breached (min eigenvalue {min_eig:.3e} < "
                        f"-{positivity_tol:g}) at step {s}; reduce dt")
    return rho, col, dY_out, sig_out


def filter_homodyne(rho0, record_source, H, collapse: CollapseSet,
                    config: IntegrationConfig) -> Trajectory:
    """Conditioned-density filter ρ += ℒ*(ρ)dt + Σ_a(L_aρ + ρL_a - 2 tr(L_aρ) ρ) dI_a.

    With ``fresh_noise`` the innovations are drawn Wiener increments and the
    record is synthesized as dY_a = 2 tr(L_a ρ) dt + dW_a; with ``replay`` the
    innovations are recomputed against the filter's own predicted signal.
    """
    if config.scheme != "euler_maruyama_renorm":
        raise ValidationError("filter_homodyne requires scheme 'euler_maruyama_renorm'")
    D = collapse.dimension
    rho = _as_density_batch(rho0, D, 1)
    Hm = None if H is None else as_matrix(H, D)
    _check_stability(collapse, config.dt)

    streams, replay_dY = None, None
    if isinstance(record_source, FreshNoise):
        seed = config.seed if record_source.seed is None else record_source.seed
        streams = [trajectory_stream(seed, config.trajectory_index)]
    elif isinstance(record_source, Replay):
        rec = record_source.record
        if rec.kind != "homodyne":
            raise ReplayError(f"cannot replay a {rec.kind} record through the homodyne filter")
        if rec.n_channels != collapse.rank:
            raise ReplayError(
                f"record has {rec.n_channels} channels but the collapse set has {collapse.rank}")
        if rec.dt != config.dt:
            raise ReplayError(
                f"record dt {rec.dt!r} differs from config dt {config.dt!r}; "
                f"increments are step-size specific and cannot be rescaled")
        if rec.n_steps < config.n_steps:
            raise ReplayError(
                f"record has {rec.n_steps} steps, fewer than the {config.n_steps} requested")
        replay_dY = rec.increments[None, : config.n_steps, :]
    else:
        raise ValidationError("record_source must be fresh_noise(...) or replay(...)")

    _, col, dY, sig = _filter_homodyne_core(
        rho, Hm, collapse, config.dt, config.n_steps, config.record_stride,
        streams=streams, replay_dY=replay_dY, keep_states=True, keep_record=True,
        positions=_positions_of(collapse))
    record = MeasurementRecord(kind="homodyne", dt=config.dt,
                               increments=dY[0], expected_signal=sig[0])
    return Trajectory(times=config.recorded_times(), kind="mixed",
                      states=col.states[:, 0], record=record,
                      observables={"trace_drift": col.drift[:, 0],
                                   "pos_var": col.pos_var[:, 0]},
                      config=config)


# ---------------------------------------------------------------------------
# number-counting jump filter
# ---------------------------------------------------------------------------

def _counting_core(rho: np.ndarray, Hm, collapse: CollapseSet, dt: float,
                   n_steps: int, stride: int, streams, *, keep_states: bool,
                   keep_record: bool, accumulate_mean: bool = False,
                   positions=None):
    ell = collapse.diagonals
    R, D = ell.shape
    B = rho.shape[0]
    s2 = collapse.total_rate_diagonal()
    m2 = 0.5 * (s2[:, None] + s2[None, :])
    ell2T = (ell**2).T
    hbar = collapse.constants.hbar

    col = _Collector(n_steps // stride + 1, B, D, "mixed", keep_states=keep_states,
                     accumulate_mean=accumulate_mean, positions=positions)
    col.store(0, rho, np.zeros(B))
    dN_out = np.zeros((B, n_steps, R), dtype=np.uint8) if keep_record else None
    nu_out = np.zeros((B, n_steps, R)) if keep_record else None
    jump_counts = np.zeros((B, R), dtype=np.int64)
    suppressed = 0

    s = 0
    while s < n_steps:
        nb = min(NOISE_BLOCK_STEPS, n_steps - s)
        u_block = _draw_uniforms(streams, nb, R)
        for k in range(nb):
            diag = np.einsum("bii->bi", rho).real
            nu = diag @ ell2T                              # intensities tr(L_a†L_a ρ)
            hit = u_block[:, k, :] < nu * dt
            guarded = hit & (nu < JUMP_INTENSITY_FLOOR)
            if guarded.any():
                suppressed += int(guarded.sum())
                hit &= ~guarded
            if keep_record:
                nu_out[:, s, :] = nu
                dN_out[:, s, :] = hit
            jump_counts += hit

            # exact nonlinear no-jump drift: -i/ħ[H,ρ] + Σ_a(ν_a ρ - ½{L_a²,ρ})
            drift = (nu.sum(1)[:, None, None] - m2[None, :, :]) * rho
            if Hm is not None:
                drift = drift + (np.matmul(Hm, rho) - np.matmul(rho, Hm)) / (1j * hbar)
            rho = rho + dt * drift
            for b, a in zip(*np.nonzero(hit)):
                la = ell[a]
                jumped = (la[:, None] * la[None, :]) * rho[b]
                rho[b] = jumped / np.trace(jumped).real
            rho = 0.5 * (rho + rho.conj().transpose(0, 2, 1))
            tr = np.einsum("bii->b", rho).real
            if tr.min() < 0.25:
                raise StepSizeError(f"jump-filter trace collapsed at step {s}; reduce dt")
            rho = rho / tr[:, None, None]
            s += 1
            if s % stride == 0:
                col.store(s // stride, rho, np.abs(tr - 1.0))
    return rho, col, dN_out, nu_out, jump_counts, suppressed


def filter_counting(rho0, H, collapse: CollapseSet,
                    config: IntegrationConfig) -> Trajectory:
    """Number-counting unraveling with Bernoulli-thinned jumps.

    Between jumps dρ = [-(i/ħ)[H,ρ] + Σ_a(tr(L_a†L_aρ) ρ - ½{L_a†L_a, ρ})] dt;
    a jump in channel a replaces ρ by L_a ρ L_a† / tr(L_a ρ L_a†).  The record
    stores dN_a and the pre-jump intensities, from which the compensated
    innovations dN_a - ν_a dt follow.
    """
    if config.scheme != "euler_maruyama_renorm":
        raise ValidationError("filter_counting requires scheme 'euler_maruyama_renorm'")
    D = collapse.dimension
    rho = _as_density_batch(rho0, D, 1)
    Hm = None if H is None else as_matrix(H, D)
    _check_stability(collapse, config.dt)
    streams = [trajectory_stream(config.seed, config.trajectory_index)]
    _, col, dN, nu, counts, suppressed = _counting_core(
        rho, Hm, collapse, config.dt, config.n_steps, config.record_stride,
        streams, keep_states=True, keep_record=True,
        positions=_positions_of(collapse))
    record = MeasurementRecord(kind="counting", dt=config.dt,
                               increments=dN[0].astype(float), expected_signal=nu[0])
    return Trajectory(times=config.recorded_times(), kind="mixed",
                      states=col.states[:, 0], record=record,
                      observables={"trace_drift": col.drift[:, 0],
                                   "pos_var": col.pos_var[:, 0]},
                      config=config,
                      log={"jump_counts": counts[0], "suppressed_jumps": suppressed})


def generate_measurement_record(trajectory: Trajectory) -> MeasurementRecord:
    """Extract the replayable record from a trajectory that retained one."""
    if trajectory.record is None:
        raise ValidationError("trajectory carries no measurement record")
    return trajectory.record


# ---------------------------------------------------------------------------
# post-hoc observables
# ---------------------------------------------------------------------------

def state_populations(states: np.ndarray, kind: str) -> np.ndarray:
    if kind == "pure":
        return states.real**2 + states.imag**2
    return np.einsum("...ii->...i", states).real


def trajectory_observables(traj: Trajectory, collapse: CollapseSet,
                           particle: int = 0) -> dict[str, np.ndarray]:
    """Purity and position statistics along a recorded trajectory."""
    pops = state_populations(traj.states, traj.kind)
    positions = collapse.family.space.particle_positions(particle)
    mean = pops @ positions
    out = dict(traj.observables)
    if traj.kind == "pure":
        out["purity"] = np.ones(len(traj.times))
    else:
        out["purity"] = np.einsum("tij,tji->t", traj.states, traj.states).real
    out["pos_mean"] = mean[:, 0] if positions.shape[1] == 1 else np.linalg.norm(mean, axis=1)
    out["pos_var"] = position_variance(pops, positions)
    return out
