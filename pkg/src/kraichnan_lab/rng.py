"""Philox4x32-10 counter-based generator (numba kernels).

Every draw is a pure function of (counter, key), so sample ``s`` at step
``n`` reads its own block of the stream regardless of thread scheduling.
Counter words are (block, step, sample_lo, sample_hi); the key is the
64-bit seed split into two words.
"""
from __future__ import annotations

import math

import numba
import numpy as np

MASK32 = 0xFFFFFFFF
M0 = 0xD2511F53
M1 = 0xCD9E8D57
W0 = 0x9E3779B9
W1 = 0xBB67AE85
TWO_POW_M32 = 2.0 ** -32


@numba.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds; all words held in uint64 and masked to 32 bits."""
    for r in range(10):
        p0 = np.uint64(M0) * c0
        p1 = np.uint64(M1) * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & np.uint64(MASK32)
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & np.uint64(MASK32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        if r < 9:
            k0 = (k0 + np.uint64(W0)) & np.uint64(MASK32)
            k1 = (k1 + np.uint64(W1)) & np.uint64(MASK32)
    return c0, c1, c2, c3


def philox_block(counter, key) -> tuple[int, int, int, int]:
    """Python entry point: four 32-bit outputs for a counter (4 words) and key (2 words)."""
    c = [np.uint64(int(x) & MASK32) for x in counter]
    k = [np.uint64(int(x) & MASK32) for x in key]
    out = philox4x32(c[0], c[1], c[2], c[3], k[0], k[1])
    return tuple(int(x) for x in out)


@numba.njit(cache=True, inline="always")
def to_unit(x):
    """32-bit word to a uniform in the open interval (0, 1)."""
    return (np.float64(x) + 0.5) * TWO_POW_M32


@numba.njit(cache=True)
def complex_normals(out, step, sample, k0, k1):
    """Fill ``out`` with complex normals of unit mean square, two per Philox block.

    Z = sqrt(-log u1) exp(2 pi i u2) has independent real and imaginary parts
    of variance 1/2, i.e. (B1 + i B2) / sqrt(2) for unit-variance B1, B2.
    """
    n = out.shape[0]
    s_lo = np.uint64(sample & MASK32)
    s_hi = np.uint64((sample >> 32) & MASK32)
    st = np.uint64(step & MASK32)
    for b in range((n + 1) // 2):
        x0, x1, x2, x3 = philox4x32(np.uint64(b), st, s_lo, s_hi, k0, k1)
        for q in range(2):
            i = 2 * b + q
            if i >= n:
                break
            u1 = to_unit(x0 if q == 0 else x2)
            u2 = to_unit(x1 if q == 0 else x3)
            rad = math.sqrt(-math.log(u1))
            ang = 2.0 * math.pi * u2
            out[i] = complex(rad * math.cos(ang), rad * math.sin(ang))


def seed_key(seed: int) -> tuple[np.uint64, np.uint64]:
    if not (0 <= seed < 2 ** 64):
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.uint64(seed & MASK32), np.uint64((seed >> 32) & MASK32)


def complex_normal_draws(n: int, step: int, sample: int, seed: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.complex128)
    k0, k1 = seed_key(seed)
    complex_normals(out, step, sample, k0, k1)
    return out
