"""Counter-based deterministic random streams.

Every stochastic routine in this package draws from a named stream so that
results are reproducible bit-for-bit from ``(seed, stream_id)`` alone,
independent of call order or process layout.

The generator is numpy's Philox (Philox4x64-10: four 64-bit counter words,
two 64-bit key words, ten rounds).  We key it with
``key = [seed, stream_id]`` so distinct purposes never share a counter
sequence even under the same user seed.

Derived draws go through documented, stable constructions only:

* uniforms come from ``Generator.random()``, which maps a 64-bit word ``x``
  to ``(x >> 11) * 2**-53`` in ``[0, 1)``;
* Bernoulli(p) is ``u < p``;
* standard normals use the explicit Box-Muller transform
  ``z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (the ``1 - u1`` guards
  ``log(0)``), never the library's ziggurat sampler, whose internals are
  not part of any documented contract.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "stream",
    "uniform",
    "bernoulli",
    "standard_normal",
    "normal",
    "lognormal",
]

_KEY_MOD = 1 << 64


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Return the Philox generator for one named purpose.

    ``seed`` and ``stream_id`` are reduced modulo 2**64; equal pairs give
    byte-identical sequences on every platform numpy supports.
    """
    key = np.array([int(seed) % _KEY_MOD, int(stream_id) % _KEY_MOD], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform(gen: np.random.Generator, size=None) -> np.ndarray:
    """Uniform draws in [0, 1) with 53-bit mantissas."""
    return gen.random(size)


def bernoulli(gen: np.random.Generator, p: float, size=None) -> np.ndarray:
    """Bernoulli(p) as uint8, via the threshold rule u < p."""
    return (gen.random(size) < p).astype(np.uint8)


def standard_normal(gen: np.random.Generator, size) -> np.ndarray:
    """Standard normals via explicit Box-Muller on stream uniforms.

    Each output consumes exactly two uniforms, so the stream position after
    ``n`` normals is ``2 n`` uniforms regardless of numpy version.
    """
    n = int(np.prod(size)) if not np.isscalar(size) else int(size)
    u1 = gen.random(n)
    u2 = gen.random(n)
    z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(size)


def normal(gen: np.random.Generator, loc: float, scale: float, size) -> np.ndarray:
    return loc + scale * standard_normal(gen, size)


def lognormal(gen: np.random.Generator, mu: float, sigma: float, size) -> np.ndarray:
    """exp(N(mu, sigma^2)) draws; used for positive per-image scale factors."""
    return np.exp(normal(gen, mu, sigma, size))
