"""Portable random streams and seed splitting.

Synthetic banks are drawn from xoshiro256** (Blackman & Vigna) seeded through
SplitMix64, so any language can reproduce them:

* state = four successive SplitMix64 outputs from the 64-bit seed;
* uniform double = ``(next() >> 11) * 2**-53``;
* standard normals come in Box-Muller pairs from two uniforms ``u1, u2``:
  ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``; an odd request
  drops the final sine value.

Everything else (episodes, dropout masks, households) uses numpy's PCG64
seeded from :func:`sub_seed`.
"""
import hashlib

import numpy as np

from . import _kernels

_M64 = (1 << 64) - 1


def splitmix64(x):
    """One SplitMix64 step: returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return x, z ^ (z >> 31)


def sub_seed(global_seed, component, index=0):
    """Derive a 64-bit seed as ``hash64(global_seed, component, index)``.

    hash64 is the first 8 bytes (little endian) of BLAKE2b over the UTF-8 text
    ``f"{global_seed}/{component}/{index}"``.
    """
    text = f"{int(global_seed)}/{component}/{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def numpy_rng(global_seed, component, index=0):
    return np.random.Generator(np.random.PCG64(sub_seed(global_seed, component, index)))


class Xoshiro256:
    """xoshiro256** stream with numpy-array helpers."""

    def __init__(self, seed):
        x = int(seed) & _M64
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    def random(self, n):
        return _kernels.xoshiro_uniform(self.state, int(n))

    def normal(self, n):
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def unit_vector(self, dim):
        v = self.normal(dim)
        return v / np.linalg.norm(v)
