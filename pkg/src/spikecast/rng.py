"""Seeded pseudo-random streams built on the xoshiro256** update rule.

Everything in this package that needs randomness (weight init, shuffling,
synthetic data, search proposals) draws from :class:`RandomStream`, so runs
are bit-reproducible from a single integer seed with no dependence on any
library's generator internals.

For throughput the stream maintains a bank of independent xoshiro256**
generators (each seeded from a common splitmix64 chain) and interleaves
their outputs round-robin, one full bank per block.  The per-generator
update is exactly the published xoshiro256** recurrence.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_DOUBLE_SCALE = float(2.0**-53)


def splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z = z ^ (z >> 31)
    return state, z


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    k64 = np.uint64(k)
    comp = np.uint64(64 - k)
    return ((x << k64) | (x >> comp)) & _MASK64


class RandomStream:
    """Deterministic random source with numpy-vectorised output.

    Parameters
    ----------
    seed : int
        Any integer; hashed through splitmix64 into the generator bank.
    lanes : int
        Number of parallel xoshiro256** generators.  Part of the stream
        definition: the same (seed, lanes) pair always yields the same
        draw sequence.
    """

    def __init__(self, seed: int, lanes: int = 256):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.seed = int(seed)
        self.lanes = int(lanes)
        state = self.seed & 0xFFFFFFFFFFFFFFFF
        words = np.empty((4, lanes), dtype=np.uint64)
        for lane in range(lanes):
            for j in range(4):
                state, out = splitmix64_next(state)
                words[j, lane] = out
        # splitmix64 output is never all-zero across a lane in practice,
        # but guard the degenerate xoshiro state anyway.
        dead = (words == 0).all(axis=0)
        words[0, dead] = 1
        self._s = words
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def _next_block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * np.uint64(5)) & _MASK64, 7) * np.uint64(9)) & _MASK64
        t = (s1 << np.uint64(17)) & _MASK64
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = np.stack([s0, s1, s2, s3])
        return result

    def _raw(self, n: int) -> np.ndarray:
        """Next n uint64 draws, in stream order."""
        out = np.empty(n, dtype=np.uint64)
        filled = 0
        while filled < n:
            if self._pos >= self._buf.size:
                self._buf = self._next_block()
                self._pos = 0
            take = min(n - filled, self._buf.size - self._pos)
            out[filled : filled + take] = self._buf[self._pos : self._pos + take]
            self._pos += take
            filled += take
        return out

    def random(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """Doubles in [0, 1) with 53-bit resolution."""
        if size is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * _DOUBLE_SCALE
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        vals = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
        return vals.reshape(shape)

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, bound: int, size: int | None = None):
        """Integers in [0, bound).  Modulo reduction; the 2**-64-level bias
        is irrelevant for shuffling and sampling at package scales."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if size is None:
            return int(self._raw(1)[0] % np.uint64(bound))
        return (self._raw(size) % np.uint64(bound)).astype(np.int64)

    def normal(self, size: int | tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on consecutive uniform pairs."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # in (0, 1], keeps log finite
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        pairs = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return (scale * pairs[:n]).reshape(shape)

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates over the leading axis."""
        n = len(items)
        if n < 2:
            return
        raw = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(raw[n - 1 - i] % np.uint64(i + 1))
            items[i], items[j] = items[j].copy(), items[i].copy()

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self.shuffle(idx)
        return idx

    def choice(self, n: int, p: np.ndarray) -> int:
        """Sample an index in [0, n) with probabilities p."""
        c = np.cumsum(p)
        c /= c[-1]
        return int(np.searchsorted(c, self.random(), side="right").clip(0, n - 1))

    def child(self, tag: int) -> "RandomStream":
        """Independent sub-stream derived from (seed, tag)."""
        _, mixed = splitmix64_next((self.seed ^ (tag * 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF)
        return RandomStream(mixed, lanes=self.lanes)


def he_uniform(rng: RandomStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-style uniform init, limit sqrt(6 / fan_in)."""
    limit = math.sqrt(6.0 / float(fan_in))
    return rng.uniform(-limit, limit, shape)
