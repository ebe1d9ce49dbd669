"""Counter-based random streams keyed by (seed, replica).

Each replica owns an independent Philox stream derived from
SeedSequence([seed, replica, purpose]), so ensembles reproduce regardless of how
replicas are scheduled across workers. Uniforms are drawn in blocks; the
counter records how many have been consumed.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.config import get_settings


# Stream purposes within one (seed, replica) key
DYNAMICS_STREAM = 0
SAMPLING_STREAM = 1


def make_generator(seed: int, replica: int = 0, purpose: int = DYNAMICS_STREAM) -> np.random.Generator:
    """Philox generator for the (seed, replica, purpose) stream."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), int(replica), int(purpose)]))
    )


@dataclass(frozen=True)
class StreamState:
    seed: int
    replica: int
    counter: int


class CounterStream:
    """Buffered uniform stream on (0, 1] with a consumption counter."""

    def __init__(self, seed: int, replica: int = 0, block_size: Optional[int] = None):
        self.seed = int(seed)
        self.replica = int(replica)
        self.block_size = block_size or get_settings().rng_block_size
        self.counter = 0
        self._generator = make_generator(self.seed, self.replica, DYNAMICS_STREAM)
        self._buffer = np.empty(0)
        self._position = 0

    @classmethod
    def restore(cls, state: StreamState, block_size: Optional[int] = None) -> "CounterStream":
        stream = cls(state.seed, state.replica, block_size)
        stream.skip(state.counter)
        return stream

    def _refill(self) -> None:
        # 1 - U maps [0, 1) onto (0, 1] so logarithms stay finite
        self._buffer = 1.0 - self._generator.random(self.block_size)
        self._position = 0

    def uniform(self) -> float:
        if self._position >= self._buffer.size:
            self._refill()
        value = float(self._buffer[self._position])
        self._position += 1
        self.counter += 1
        return value

    def exponential(self, rate: float) -> float:
        return -np.log(self.uniform()) / rate

    def skip(self, count: int) -> None:
        for _ in range(int(count)):
            self.uniform()

    @property
    def state(self) -> StreamState:
        return StreamState(self.seed, self.replica, self.counter)
