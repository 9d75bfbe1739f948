"""Deterministic counter-based random number generator.

The generator is SplitMix64 used in counter mode: draw ``i`` of a stream
seeded with ``s`` is ``mix64(s + (i + 1) * GAMMA)`` where ``GAMMA`` is the
64-bit golden-ratio constant 0x9E3779B97F4A7C15 and ``mix64`` is the
murmur-style finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic modulo 2**64). Because the state is a pure function of
(seed, counter), any block of draws can be produced with vectorized uint64
arithmetic and two generators never share hidden state.

Uniform doubles take the top 53 bits: ``u = (z >> 11) * 2**-53`` in [0, 1).
Standard normals use the Box-Muller transform on uniform pairs. Uniform
draws are bit-exact on any IEEE-754 platform; normal draws additionally
depend on libm's log/cos/sin rounding and are pinned by reference tests on
the build toolchain.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ParameterError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FORK = np.uint64(0xD1B54A32D192ED03)
_U64 = np.uint64
_TWO53 = float(2**53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wraparound arithmetic)."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class Rng:
    """Seeded deterministic stream of uniforms, normals and shuffles.

    State is (seed, counter); identical seeds give identical draw sequences
    across runs. ``fork`` derives an independent child stream from an
    integer or string tag, which is how the engine separates the dropout,
    noise, shuffle, ... streams of one run seed.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def clone(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def fork(self, tag) -> "Rng":
        """Derive an independent child stream; deterministic in (seed, tag)."""
        if isinstance(tag, str):
            tag = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
        with np.errstate(over="ignore"):
            z = _U64(self.seed) ^ _mix64(_U64((int(tag) + 1) & 0xFFFFFFFFFFFFFFFF) * _FORK)
            child = int(_mix64(z))
        return Rng(child)

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words; advances the counter by n."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(_U64(self.seed) + idx * _GAMMA)

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. doubles in [0, 1) from the top 53 bits of each word."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) / _TWO53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller on uniform pairs.

        Consumes 2*ceil(n/2) uniforms so the counter advance depends only
        on the requested count.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        if m == 0:
            return np.zeros(shape)
        u1 = self.uniform((m,))
        u2 = self.uniform((m,))
        # 1 - u1 lies in (0, 1], so the log argument is never zero.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def index(self, n: int) -> int:
        """One integer uniform on [0, n)."""
        if n <= 0:
            raise ParameterError(f"index() needs n >= 1, got {n}")
        u = float(self._raw(1)[0] >> _U64(11)) / _TWO53
        return min(int(u * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = (self._raw(n - 1) >> _U64(11)).astype(np.float64) / _TWO53
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from range(n), in draw order (k <= n)."""
        if k > n:
            raise ParameterError(f"cannot choose {k} from {n} without replacement")
        pool = np.arange(n, dtype=np.int64)
        if k == 0:
            return pool[:0]
        u = (self._raw(k) >> _U64(11)).astype(np.float64) / _TWO53
        for i in range(k):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
