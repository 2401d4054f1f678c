"""Counter-based random streams.

Every source of randomness in a run is an (seed, purpose, counter) triple;
a draw advances the counter, and a stream can be rebuilt mid-run from its
state alone. That is what makes checkpoint resume bit-identical to an
uninterrupted run.
"""
from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("init", "masking", "label_noise", "drop_path", "data")


class RngStream:
    """Deterministic stream of independent draws keyed by (seed, purpose, counter)."""

    def __init__(self, seed: int, purpose: str = "", counter: int = 0):
        self.seed = int(seed)
        self.purpose = purpose
        self.counter = int(counter)
        self._purpose_id = zlib.crc32(purpose.encode("utf-8"))

    def _next_generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=(self.seed, self._purpose_id, self.counter))
        self.counter += 1
        return np.random.default_rng(seq)

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._next_generator().standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next_generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next_generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def state(self) -> dict:
        return {"seed": self.seed, "purpose": self.purpose, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["seed"], state.get("purpose", ""), state.get("counter", 0))


def stream_bundle(master_seed: int, purposes=PURPOSES) -> dict:
    """One independent stream per purpose, all derived from a master seed."""
    return {p: RngStream(master_seed, p) for p in purposes}
