"""Deterministic randomness built on a counter-based generator.

A single root seed drives every random decision in the package. Independent
streams are derived by hashing the parent seed together with a string label,
so concurrent or reordered consumers cannot perturb each other's draws and
the same seed reproduces the same values on every platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ALGORITHM = "philox4x64"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """Seed for one named stream of the fixed counter-based generator."""

    seed: int
    algorithm: str = ALGORITHM

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must fit in 64 bits")
        if self.algorithm != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, label) -> "RngState":
        """Derive an independent child stream keyed by ``label``."""
        digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return RngState(int.from_bytes(digest[:8], "little"))
