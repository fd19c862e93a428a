"""Deterministic ensemble orchestration.

Trajectories are partitioned into fixed-size chunks (a function of the
ensemble size only, never of the thread count); each chunk evolves as one
batched integration whose per-trajectory noise streams are keyed by
(seed, global trajectory index).  Chunk partials are combined by pairwise
tree reduction in chunk order, so results are bit-identical for any number
of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    IntegrationConfig,
    _as_density_batch,
    _as_pure_batch,
    _check_stability,
    _counting_core,
    _filter_homodyne_core,
    _homodyne_core,
    _positions_of,
)
from .errors import ValidationError
from .quantum_ops import CollapseSet, as_matrix
from .rng import trajectory_stream

DEFAULT_CHUNK_SIZE = 512

ENSEMBLE_KINDS = ("homodyne", "counting", "filter_fresh")


@dataclass(eq=False)
class EnsembleResult:
    kind: str
    times: np.ndarray
    n_traj: int
    mean_states: np.ndarray              # (T, D, D) ensemble-averaged density
    final_states: np.ndarray             # (N, D) pure or (N, D, D) mixed
    position_variance: np.ndarray        # (T, N) per-trajectory variance
    mean_drift: np.ndarray               # (T,) mean pre-renormalization drift
    jump_counts: np.ndarray | None = None  # (N, R) for counting ensembles

    @property
    def dimension(self) -> int:
        return self.mean_states.shape[1]


def _tree_sum(parts: list):
    while len(parts) > 1:
        parts = [parts[i] + parts[i + 1] if i + 1 < len(parts) else parts[i]
                 for i in range(0, len(parts), 2)]
    return parts[0]


def run_ensemble(kind: str, initial, H, collapse: CollapseSet,
                 config: IntegrationConfig, n_traj: int, threads: int = 1,
                 chunk_size: int = DEFAULT_CHUNK_SIZE) -> EnsembleResult:
    """Evolve ``n_traj`` independent trajectories and reduce them.

    ``kind``: 'homodyne' (pure-state diffusive), 'filter_fresh' (density
    filter driven by fresh innovations), or 'counting' (jump filter).
    Trajectory i uses the noise stream keyed by (config.seed, i) regardless
    of chunking or threading.
    """
    if kind not in ENSEMBLE_KINDS:
        raise ValidationError(f"ensemble kind must be one of {ENSEMBLE_KINDS}, got {kind!r}")
    if n_traj < 1:
        raise ValidationError("n_traj must be >= 1")
    D = collapse.dimension
    Hm = None if H is None else as_matrix(H, D)
    positions = _positions_of(collapse)
    _check_stability(collapse, config.dt)
    pure = kind == "homodyne"
    proto = (_as_pure_batch(initial, D, 1) if pure else _as_density_batch(initial, D, 1))[0]

    bounds = [(lo, min(lo + chunk_size, n_traj)) for lo in range(0, n_traj, chunk_size)]

    def run_chunk(chunk_index: int):
        lo, hi = bounds[chunk_index]
        batch = hi - lo
        streams = [trajectory_stream(config.seed, i) for i in range(lo, hi)]
        state0 = np.tile(proto, (batch,) + (1,) * proto.ndim)
        if kind == "homodyne":
            final, col, _, _ = _homodyne_core(
                state0, Hm, collapse, config.dt, config.n_steps, config.record_stride,
                streams, keep_states=False, keep_record=False,
                accumulate_mean=True, positions=positions)
            extra = None
        elif kind == "filter_fresh":
            final, col, _, _ = _filter_homodyne_core(
                state0, Hm, collapse, config.dt, config.n_steps, config.record_stride,
                streams=streams, keep_states=False, keep_record=False,
                accumulate_mean=True, positions=positions)
            extra = None
        else:
            final, col, _, _, counts, _ = _counting_core(
                state0, Hm, collapse, config.dt, config.n_steps, config.record_stride,
                streams, keep_states=False, keep_record=False,
                accumulate_mean=True, positions=positions)
            extra = counts
        return chunk_index, col.mean, final, col.pos_var, col.drift.sum(axis=1), extra

    if threads <= 1:
        raw = [run_chunk(c) for c in range(len(bounds))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(run_chunk, range(len(bounds))))
    raw.sort(key=lambda item: item[0])

    mean_states = _tree_sum([r[1] for r in raw]) / n_traj
    final_states = np.concatenate([r[2] for r in raw], axis=0)
    pos_var = np.concatenate([r[3] for r in raw], axis=1)
    mean_drift = _tree_sum([r[4] for r in raw]) / n_traj
    jump_counts = (np.concatenate([r[5] for r in raw], axis=0)
                   if kind == "counting" else None)
    return EnsembleResult(kind=kind, times=config.recorded_times(), n_traj=n_traj,
                          mean_states=mean_states, final_states=final_states,
                          position_variance=pos_var, mean_drift=mean_drift,
                          jump_counts=jump_counts)
