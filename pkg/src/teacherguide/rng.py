"""Seeded counter-based random streams.

Every trajectory owns one Philox stream per purpose, keyed by
``(seed, purpose, trajectory index)``. Draws therefore never depend on how a
batch is split across workers, and variants that share a purpose share the
exact same noise (common random numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PURPOSES = {
    "init": 0,
    "ancestral": 1,
    "renoise": 2,
    "renoise-time": 3,
    "projection": 4,
    "reference": 5,
    "analytic": 6,
    "probe": 7,
}


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be an unsigned 64-bit integer")

    def child(self, *key: int) -> RngStream:
        return RngStream(self.seed, self.stream + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def stream_for(seed: int, purpose: str, *key: int) -> RngStream:
    return RngStream(seed, (PURPOSES[purpose],) + tuple(int(k) for k in key))


class StreamBank:
    """Per-trajectory generators for one purpose, drawn row by row.

    Quacks like ``np.random.Generator`` for the calls samplers make, with the
    leading axis of every requested shape indexing trajectories.
    """

    def __init__(self, seed: int, purpose: str, indices: Sequence[int]):
        self.seed = int(seed)
        self.purpose = purpose
        self.indices = np.asarray(indices, dtype=np.int64)
        self._gens = [stream_for(seed, purpose, i).generator() for i in self.indices]
        self.counter = 0

    def __len__(self):
        return len(self._gens)

    def _rows(self, shape) -> tuple[int, ...]:
        shape = tuple(np.atleast_1d(shape))
        if shape[0] != len(self._gens):
            raise ValueError(f"leading axis {shape[0]} != {len(self._gens)} trajectories")
        self.counter += 1
        return shape[1:]

    def standard_normal(self, shape) -> np.ndarray:
        rest = self._rows(shape)
        return np.stack([g.standard_normal(rest) for g in self._gens])

    def choice(self, options, n: int) -> np.ndarray:
        self._rows((n,))
        options = np.asarray(options)
        return np.array([options[g.integers(options.size)] for g in self._gens])

    def state(self) -> list:
        return [g.bit_generator.state for g in self._gens]


@dataclass
class TrajectoryRng:
    """Lazily built stream banks for a block of trajectories."""

    seed: int
    indices: np.ndarray
    _banks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @classmethod
    def range(cls, seed: int, n: int, start: int = 0) -> TrajectoryRng:
        return cls(seed, np.arange(start, start + n))

    def __len__(self):
        return self.indices.size

    def bank(self, purpose: str) -> StreamBank:
        if purpose not in self._banks:
            self._banks[purpose] = StreamBank(self.seed, purpose, self.indices)
        return self._banks[purpose]

    def consumption(self) -> dict:
        return {p: (b.counter, b.state()) for p, b in sorted(self._banks.items())}
