"""Explicitly seeded random streams.

Every stream is a Philox (counter-based) generator keyed by ``(seed, path)``.
Trainers derive one child stream per purpose and per step, so a run is a pure
function of its seed and never depends on how many draws happened earlier.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_int(name: Key) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"rng key must be non-negative, got {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


class Rng:
    """A seeded generator; ``child(...)`` derives independent sub-streams."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *names: Key) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_int(n) for n in names))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    # state handling, used by checkpoints
    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    # draws
    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def gumbel(self, size=None) -> np.ndarray:
        u = self._gen.random(size)
        # keep u inside (0, 1) so both logs stay finite
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        return -np.log(-np.log(u))
