"""Counter-based random streams.

Trajectory ``i`` of a run seeded with ``seed`` always draws from the Philox
stream keyed by the pair ``(seed, i)``, and consumes its draws in
(step, channel) lexicographic order. The stream is therefore independent of
thread scheduling, chunking, and batch size, which is what the
bit-reproducibility contract rests on.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

MAX_SEED = 2**63 - 1


def validate_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or not (0 <= int(seed) <= MAX_SEED):
        raise ValidationError(f"seed must be an integer in [0, 2^63-1], got {seed!r}")
    return int(seed)


def trajectory_stream(seed: int, trajectory_index: int) -> np.random.Generator:
    """Independent stream for one trajectory, keyed by (seed, index)."""
    validate_seed(seed)
    if trajectory_index < 0:
        raise ValidationError("trajectory_index must be >= 0")
    key = np.array([seed, trajectory_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an integer seed (stream index 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return trajectory_stream(rng, 0)
