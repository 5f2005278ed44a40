"""Deterministic pseudo-random generator for reproducible test fixtures.

The generator is splitmix64: the 64-bit state advances by the golden-ratio
increment and each output is a fixed avalanche mix of the new state. It is
simple enough to reimplement bit-for-bit in any language, which is the
point: fixtures generated here can be regenerated elsewhere and compared
byte by byte.

Draw accounting is part of the contract. Every uniform consumes exactly one
64-bit output; ``gaussians(n)`` consumes ``2 * ceil(n / 2)`` outputs
(Box-Muller pairs); ``poisson`` consumes one. Scalar and vectorized calls
advance the same stream identically.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# float64 has a 53-bit mantissa; top 53 bits of the output map to [0, 1)
_INV_2_53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Seeded splitmix64 stream with scalar and vectorized draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def _u64_block(self, n: int) -> np.ndarray:
        """n raw outputs as uint64, advancing the stream by n steps."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GAMMA) & _MASK
        return z

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), identical to n scalar ``uniform()`` calls."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        block = self._u64_block(n)
        return (block >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussians(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs.

        Pair k uses uniforms (2k, 2k+1); the log argument is 1 - u to stay
        in (0, 1]. An odd n still consumes the full last pair.
        """
        if n == 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def randint_below(self, n: int) -> int:
        """Integer in [0, n) as floor(u * n); bias is negligible for n << 2^53."""
        return min(int(self.uniform() * n), n - 1)

    def poisson(self, lam: float, cap: int = 64) -> int:
        """Poisson count by CDF inversion of a single uniform, capped."""
        if lam <= 0.0:
            self.uniform()  # keep draw accounting independent of lam
            return 0
        u = self.uniform()
        pmf = math.exp(-lam)
        cdf = pmf
        k = 0
        while u >= cdf and k < cap:
            k += 1
            pmf *= lam / k
            cdf += pmf
        return k
