"""Seeded xorshift64* generator.

All stochastic parts of the toolkit (reparameterization noise, latent
sampling, epoch shuffles, stratified splits) draw from this generator so that
streams are reproducible from the seed alone, independent of numpy's
generator internals.

Definition, so the stream can be reproduced in any language:

* seeding: ``state = splitmix64(seed)``; a zero result is replaced by
  ``0x9E3779B97F4A7C15``.
* step: ``s ^= s >> 12; s ^= s << 25; s ^= s >> 27`` (64-bit wraparound),
  output ``s * 0x2545F4914F6CDD1D mod 2**64``.
* uniform in [0, 1): ``(out >> 11) * 2**-53``.
* standard normal: Box-Muller on ``u1 = 1 - uniform()``, ``u2 = uniform()``,
  emitting ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with
  ``r = sqrt(-2 ln u1)``.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, seed=0):
        s = splitmix64(int(seed) & _MASK)
        self._s = s or 0x9E3779B97F4A7C15
        self._spare = None

    def next_u64(self):
        s = self._s
        s ^= s >> 12
        s ^= (s << 25) & _MASK
        s ^= s >> 27
        self._s = s
        return (s * _MULT) & _MASK

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self):
        if self._spare is not None:
            v, self._spare = self._spare, None
            return v
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, dtype=np.float64):
        n = int(np.prod(shape))
        normal = self.normal
        out = np.fromiter((normal() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape).astype(dtype, copy=False)

    def randbelow(self, n):
        # rejection sampling keeps the result exactly uniform
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def permutation(self, n):
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            p[i], p[j] = p[j], p[i]
        return np.array(p, dtype=np.int64)
