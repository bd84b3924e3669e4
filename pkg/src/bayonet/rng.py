"""SplitMix64 pseudo-random generator.

Every stochastic component of the toolkit (dropout masks, weight init,
dataset synthesis, batch shuffling) draws from this generator so that runs
are bit-identical given the same root seed, on any platform and in any
evaluation order. SplitMix64 is a 64-bit mixer with a single additive
counter; the same sequence is trivially reproducible in other languages.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15  # additive constant of the state transition
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """Finalizing mixer applied to the raw counter value."""
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream with 64-bit state.

    One ``next_u64`` step advances the state by the golden-ratio constant
    and returns the mixed output. ``uniform01`` maps the top 53 bits to a
    double in [0, 1).
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform01(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_array(self, n: int) -> np.ndarray:
        """Next n uniforms in [0,1) as float64, identical to n uniform01 calls."""
        if n == 0:
            return np.zeros(0)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z ^= z >> np.uint64(31)
        self.state = (self.state + n * GOLDEN) & MASK64
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def randint_below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, for unbiased shuffles."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (MASK64 + 1) - (MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def shuffle(self, seq: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint_below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]


def pass_stream(root_seed: int, pass_index: int) -> Rng:
    """Derived stream for one Monte-Carlo pass.

    Sub-stream seeds are root XOR pass_index * GOLDEN, which keeps results
    independent of the order passes are evaluated in.
    """
    return Rng(root_seed ^ ((pass_index * GOLDEN) & MASK64))


def sample_stream(root_seed: int, sample_index: int) -> int:
    """Derived root seed for one input sample of a batch."""
    return root_seed ^ ((sample_index * MIX1) & MASK64)
