"""Counter-based, splittable random streams.

Every stochastic site (weight init, crop offsets, flips, Gumbel noise) draws
from its own stream keyed by ``(seed, stream_id)``.  The underlying bit
generator is Philox-4x64, whose output depends only on key and counter, so a
stream reproduces identically regardless of what other streams have consumed.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_stream_id(parent: int, *path) -> int:
    """Stable 64-bit id for a named child stream."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", parent & _MASK64))
    for part in path:
        h.update(b"\x00")
        h.update(str(part).encode("utf-8"))
    return struct.unpack("<Q", h.digest())[0]


class Rng:
    """A single random stream.

    Args:
        seed: 64-bit seed shared by all streams of one run.
        stream_id: 64-bit stream identifier.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self.generator = np.random.Generator(self._bitgen)

    def child(self, *path) -> "Rng":
        """Independent stream identified by ``path`` beneath this one."""
        return Rng(self.seed, derive_stream_id(self.stream_id, *path))

    def skip(self, draws: int) -> "Rng":
        """Advance the counter by ``draws`` 64-bit outputs' worth of blocks."""
        self._bitgen.advance(draws)
        return self

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        # random() yields multiples of 2**-53 in [0, 1); the half-step offset keeps 0 and 1 out.
        return self.generator.random(size) + 2.0**-54

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def gumbel(self, size=None) -> np.ndarray:
        """Standard Gumbel draws ``-log(-log(U))``."""
        return -np.log(-np.log(self.uniform(size)))

    def state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "bit_generator": self._bitgen.state}
