"""Seeded random streams.

Every stochastic operation in this package is a function of an explicit
:class:`RngStream`.  The stream is backed by the Philox4x32-10 counter-based
generator (via ``numpy.random.Philox``), which produces the same sequence for
the same 64-bit seed on every platform.  Child streams are derived with
:meth:`RngStream.split`, which mixes the parent seed and a child index through
splitmix64 so that parallel work never shares a stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """One splitmix64 output step; used to derive child seeds."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """A deterministic random stream with an explicit 64-bit seed.

    Identical seeds produce bit-identical sequences.  Streams are single-owner
    objects: share values, not streams, across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, index: int) -> "RngStream":
        """Derive an independent child stream.

        The child seed is ``splitmix64(splitmix64(seed) ^ splitmix64(index))``,
        so distinct (seed, index) pairs map to distinct streams.
        """
        child = splitmix64(splitmix64(self.seed) ^ splitmix64(int(index) & _MASK64))
        return RngStream(child)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size=size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def sample_in_ball(rng: RngStream, radius: float, dim: int, n: int | None = None) -> np.ndarray:
    """Sample uniformly from the closed ball of given radius centered at 0.

    Uses rejection from the enclosing cube: points are drawn uniformly in
    [-radius, radius]^dim and kept when their norm is at most ``radius``.
    With ``n=None`` a single vector of shape (dim,) is returned, otherwise an
    (n, dim) matrix.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    want = 1 if n is None else int(n)
    chunks = []
    have = 0
    # Acceptance rate of the unit ball in the cube falls with dim; fine for
    # the low-dimensional states used here.
    chunk = max(64, 2 * want)
    while have < want:
        cand = rng.uniform(-1.0, 1.0, size=(chunk, dim))
        keep = cand[np.einsum("ij,ij->i", cand, cand) <= 1.0]
        chunks.append(keep)
        have += len(keep)
    out = radius * np.concatenate(chunks)[:want]
    if n is None:
        return out[0]
    return out
