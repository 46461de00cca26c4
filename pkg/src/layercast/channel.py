"""Binary erasure broadcast channel simulation.

Each user sees the transmitted bits through an independent binary erasure
channel; a user's performance depends only on its own marginal erasure
probability, so independent per-user draws stand in for any physically
degraded coupling.  Erasure patterns come from a counter-based generator
keyed by a 64-bit seed, so every (trial, user, codeword) pattern is
reproducible in isolation and trials can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ERASED", "ErasurePattern", "erasure_pattern", "transmit", "derive_seed"]

ERASED = np.int8(-1)


def derive_seed(master_seed: int, *key: int) -> int:
    """Stable 64-bit seed for one (domain, trial, user, ...) tuple."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(x) for x in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True)
class ErasurePattern:
    """Boolean erasure flags for one codeword transmission."""

    flags: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))

    @property
    def erased_count(self) -> int:
        return int(np.count_nonzero(self.flags))


def erasure_pattern(n: int, epsilon: float, seed: int) -> ErasurePattern:
    """Draw the i.i.d. erasure flags for n symbols at erasure rate epsilon."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"erasure probability must be in [0, 1), got {epsilon}")
    if epsilon == 0.0:
        flags = np.zeros(int(n), dtype=bool)
    else:
        flags = _rng(seed).random(int(n)) < epsilon
    return ErasurePattern(flags=flags, seed=int(seed))


def transmit(bits: np.ndarray, epsilon: float, seed: int) -> np.ndarray:
    """Send bits through one erasure channel; erased positions become -1.

    Non-erased symbols pass through unchanged (no bit flips).
    """
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ValueError("transmit expects a flat bit array")
    pattern = erasure_pattern(bits.size, epsilon, seed)
    out = bits.astype(np.int8, copy=True)
    out[pattern.flags] = ERASED
    return out
