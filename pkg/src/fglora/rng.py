"""Seedable SplitMix64 stream.

SplitMix64 is counter based: output ``i`` (1-based) of a generator whose state
is ``s`` is ``mix(s + i * GAMMA)``, so a block of ``n`` outputs is computed in
one vectorised pass and the state then advances by ``n * GAMMA``.  The integer
sequence is the reference SplitMix64 sequence, e.g. seed 0 starts with
``0xE220A8397B1DCDAF``.

Derived quantities (uniforms, normals, permutations) are defined on top of the
integer stream:

* uniform double: ``(u64 >> 11) * 2**-53``  in ``[0, 1)``
* normal pair: Box-Muller on two consecutive uniforms ``(u1, u2)`` with
  ``r = sqrt(-2 ln(1 - u1))``, outputs ``r cos(2 pi u2)``, ``r sin(2 pi u2)``
* permutation of ``n``: stable argsort of ``n`` fresh u64 values
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_seed(seed: int, *tags: object) -> int:
    """Deterministic 64-bit child seed from a parent seed and any labels."""
    text = repr((int(seed) & _MASK,) + tuple(str(t) for t in tags)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def fork(self, *tags: object) -> "SplitMix64":
        """Independent child stream; does not advance this generator."""
        return SplitMix64(derive_seed(self.state, *tags))

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        if n < 0:
            raise ValueError("n must be non-negative")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & _MASK
        return z

    def uniform(self, size=None) -> np.ndarray | float:
        shape = () if size is None else np.atleast_1d(size)
        n = int(np.prod(shape)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(tuple(int(s) for s in shape))

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(np.atleast_1d(size)))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        z = loc + scale * z
        if size is None:
            return float(z[0])
        return z.reshape(tuple(int(s) for s in np.atleast_1d(size)))

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Integers in ``[0, high)`` by scaling uniforms."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(1 if size is None else size)
        v = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        if size is None:
            return int(v.reshape(-1)[0])
        return v

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def bernoulli_mask(self, shape, keep: float) -> np.ndarray:
        return (self.uniform(shape) < keep).astype(np.float64)
