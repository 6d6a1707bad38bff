"""Seeded xoshiro256** generator with splitmix64 seeding.

The stream is fully specified by the integer seed so runs are reproducible
across machines and across the numba / fallback kernel paths. Component
seeds are derived by hashing ``(seed, name, index)`` with blake2b.
"""

import hashlib
import math

import numpy as np

from ._accel import njit, pick

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_M53 = 1.0 / (1 << 53)


def splitmix64(x):
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed, *parts):
    """Hash a master seed and a component path into a fresh 64-bit seed."""
    key = ":".join([str(int(seed))] + [str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


# -- kernels -----------------------------------------------------------------

@njit
def _fill_u64_nb(s, out):
    for i in range(out.shape[0]):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


def _fill_u64_py(s, out):
    s0, s1, s2, s3 = (int(v) for v in s)
    buf = [0] * out.shape[0]
    for i in range(len(buf)):
        x = (s1 * 5) & MASK64
        x = ((x << 7) | (x >> 57)) & MASK64
        buf[i] = (x * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
    out[:] = np.array(buf, dtype=np.uint64)
    s[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)


@njit
def _shuffle_nb(draws, idx):
    n = idx.shape[0]
    for k in range(n - 1):
        i = n - 1 - k
        j = np.int64(draws[k] % np.uint64(i + 1))
        tmp = idx[i]
        idx[i] = idx[j]
        idx[j] = tmp


def _shuffle_py(draws, idx):
    n = idx.shape[0]
    # the modulo has to happen in uint64 space, then the walk is sequential
    js = [int(d % np.uint64(n - k)) for k, d in enumerate(draws[: n - 1])]
    arr = idx.tolist()
    for k, j in enumerate(js):
        i = n - 1 - k
        arr[i], arr[j] = arr[j], arr[i]
    idx[:] = arr


fill_u64 = pick(_fill_u64_nb, _fill_u64_py)
shuffle_in_place = pick(_shuffle_nb, _shuffle_py)


class Xoshiro256:
    """xoshiro256** stream.

    ``random`` uses the top 53 bits, ``integers`` reduces by modulo and
    ``permutation`` is a Fisher-Yates walk from the last index down; both
    are exact integer recipes so every port reproduces the same stream.
    """

    def __init__(self, seed):
        x = int(seed) & MASK64
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    @classmethod
    def derived(cls, seed, *parts):
        return cls(derive_seed(seed, *parts))

    def next_u64(self, n=1):
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            fill_u64(self.state, out)
        return out

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform(self, low, high, size):
        return low + (high - low) * self.random(size)

    def integers(self, high, size=None):
        """Integers in ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        n = 1 if size is None else int(np.prod(size))
        v = (self.next_u64(n) % np.uint64(high)).astype(np.int64)
        if size is None:
            return int(v[0])
        return v.reshape(size)

    def normal(self, size):
        """Standard normals by Box-Muller, two per pair of uniforms."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * math.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(size)

    def coins(self, n):
        """Fair coin flips from the top bit."""
        return (self.next_u64(n) >> np.uint64(63)).astype(bool)

    def permutation(self, n):
        idx = np.arange(n, dtype=np.int64)
        if n > 1:
            shuffle_in_place(self.next_u64(n - 1), idx)
        return idx

    def sample_without_replacement(self, n, k):
        if k > n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]
