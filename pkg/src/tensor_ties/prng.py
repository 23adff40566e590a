"""Counter-based pseudorandom numbers (splitmix64 style).

The generator is fully specified so that outputs are reproducible across
platforms and independent of evaluation order:

* ``mix64(x)`` is the splitmix64 finalizer: ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
  z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`` on 64-bit words.
* The value at counter ``i`` of a stream with key ``K`` is
  ``mix64(K + (i + 1) * 0x9E3779B97F4A7C15)`` (all mod 2**64). With ``K = 0``
  this reproduces the canonical splitmix64 sequence for seed 0.
* Stream keys are derived from a 64-bit seed and integer labels by folding:
  ``K = mix64(seed); for each label L: K = mix64(K ^ mix64(L))``.

Uniform doubles take the top 53 bits of a word; normals use Box-Muller on
two independent uniform streams (one value per counter, the sine partner is
discarded so each output depends only on its own counter).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

_INV_2_53 = float(2.0**-53)


def mix64(x: np.ndarray | int) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _C1
        z = (z ^ (z >> np.uint64(27))) * _C2
        return z ^ (z >> np.uint64(31))


def derive_key(seed: int, *labels: int) -> int:
    """Fold a seed and integer labels into a 64-bit stream key."""
    k = int(mix64(np.uint64(seed & _MASK)))
    for label in labels:
        k = int(mix64(np.uint64(k ^ int(mix64(np.uint64(label & _MASK))))))
    return k


def counter_u64(key: int, counters: np.ndarray | int) -> np.ndarray:
    """Random 64-bit words at the given counters of stream ``key``."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(key & _MASK) + (c + np.uint64(1)) * _GOLDEN
    return mix64(state)


def uniform01(key: int, counters: np.ndarray | int) -> np.ndarray:
    """Uniform float64 in [0, 1)."""
    return (counter_u64(key, counters) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def uniform_open(key: int, counters: np.ndarray | int) -> np.ndarray:
    """Uniform float64 in (0, 1] (safe as a log argument)."""
    u = (counter_u64(key, counters) >> np.uint64(11)).astype(np.float64)
    return (u + 1.0) * _INV_2_53


def standard_normal(key_r: int, key_phi: int, counters: np.ndarray | int) -> np.ndarray:
    """Standard normals via Box-Muller, one value per counter."""
    u1 = uniform_open(key_r, counters)
    u2 = uniform01(key_phi, counters)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
